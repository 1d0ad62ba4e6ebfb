"""Linear probing, finetuning, metrics, variants and pair-ratio sweeps."""

from __future__ import annotations

import copy
import csv
import logging
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import spearmanr

from .data import SyntheticDataset, WorldConfig, generate_world, labeled_split
from .model import ModelConfig, represent
from .training import TrainConfig, _seed_int, align_crossmodal, joint_pretrain, parameter_hash, pretrain_unimodal

log = logging.getLogger(__name__)

VARIANTS = ("full", "noTemp", "noShared", "noPrivate", "noAug", "concat", "joint", "cmc")
ABLATIONS = ("full", "noTemp", "noShared", "noAug", "noPrivate")


def compute_metrics(predictions, labels, num_classes: Optional[int] = None) -> dict:
    """Accuracy, macro F1 (0/0 := 0) and the confusion matrix (rows = true class)."""
    pred = np.asarray(predictions, dtype=np.int64).ravel()
    true = np.asarray(labels, dtype=np.int64).ravel()
    if len(pred) != len(true):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(true)} labels")
    if len(true) == 0:
        raise ValueError("no predictions to score")
    if min(pred.min(), true.min()) < 0:
        raise ValueError("labels must be non-negative")
    k = int(max(pred.max(), true.max())) + 1
    if num_classes is not None:
        if k > num_classes:
            raise ValueError(f"label {k - 1} out of range for {num_classes} classes")
        k = num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (true, pred), 1)
    tp = np.diag(confusion).astype(np.float64)
    pred_count = confusion.sum(axis=0).astype(np.float64)
    true_count = confusion.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, pred_count, out=np.zeros(k), where=pred_count > 0)
    recall = np.divide(tp, true_count, out=np.zeros(k), where=true_count > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(k), where=denom > 0)
    # classes that never occur in either vector are not part of the problem
    present = (pred_count + true_count) > 0
    return {
        "accuracy": float(tp.sum() / len(true)),
        "macro_f1": float(f1[present].mean()),
        "confusion": confusion,
        "precision": precision,
        "recall": recall,
    }


@dataclass
class ProbeResult:
    accuracy: float
    macro_f1: float
    precision: list
    recall: list
    confusion: list
    n_eval: int
    seed: int
    variant: str = ""

    @classmethod
    def from_predictions(cls, pred, labels, num_classes, seed, variant=""):
        m = compute_metrics(pred, labels, num_classes)
        return cls(
            accuracy=m["accuracy"],
            macro_f1=m["macro_f1"],
            precision=m["precision"].tolist(),
            recall=m["recall"].tolist(),
            confusion=m["confusion"].tolist(),
            n_eval=len(labels),
            seed=seed,
            variant=variant,
        )


@dataclass
class EvalConfig:
    probe_steps: int = 500
    probe_lr: float = 0.05
    probe_weight_decay: float = 1e-4
    finetune_steps: int = 100
    test_fraction: float = 0.5

    def validate(self) -> "EvalConfig":
        if self.probe_steps < 1:
            raise ValueError("probe_steps must be >= 1")
        if self.finetune_steps < 0:
            raise ValueError("finetune_steps must be >= 0")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError(f"test_fraction must be in (0,1), got {self.test_fraction}")
        return self


@dataclass
class VariantSpec:
    tag: str

    def __post_init__(self):
        if self.tag not in VARIANTS:
            raise ValueError(f"unknown variant {self.tag!r}; expected one of {VARIANTS}")

    def align_config(self, base: TrainConfig) -> TrainConfig:
        """Stage-2 config for this variant (weights zeroed, architecture kept)."""
        info, ssl = base.info, base.ssl
        stage = "align"
        if self.tag == "noTemp":
            ssl = replace(ssl, eta=0.0)
        elif self.tag == "noAug":
            ssl = replace(ssl, lam=0.0)
        elif self.tag == "noShared":
            info = replace(info, use_shared=False)
        elif self.tag == "noPrivate":
            info = replace(info, use_private=False)
        elif self.tag == "joint":
            stage = "joint"
        elif self.tag == "cmc":
            stage = "cmc"
        return replace(base, stage=stage, info=info, ssl=ssl)


# ------------------------------------------------------------------ probing


def _check_labels(dataset: SyntheticDataset, indices):
    if len(indices) == 0:
        raise ValueError("no labeled samples to evaluate")
    if dataset.label is None or len(dataset.label) != len(dataset):
        raise ValueError("dataset carries no labels")
    if np.any(dataset.pair_id[indices] >= 0):
        raise AssertionError("evaluation samples overlap the synchronized training pairs")


def _features(models, dataset: SyntheticDataset, indices, modalities) -> torch.Tensor:
    parts = []
    for m in modalities:
        x = torch.from_numpy(dataset.tensors[m][indices])
        parts.append(represent(models[m], x).h)
    return torch.cat(parts, dim=1).double()


def extract_features(models, dataset, indices, modalities=None) -> np.ndarray:
    modalities = range(len(models)) if modalities is None else modalities
    with torch.no_grad():
        return _features(models, dataset, indices, modalities).numpy()


class LinearHead(torch.nn.Module):
    """Affine classifier on standardized features."""

    def __init__(self, mean, std, num_classes, generator=None):
        super().__init__()
        self.register_buffer("mean", mean)
        self.register_buffer("std", std)
        self.linear = torch.nn.Linear(len(mean), num_classes, dtype=torch.float64)
        with torch.no_grad():
            self.linear.weight.normal_(0.0, 0.01, generator=generator)
            self.linear.bias.zero_()

    def forward(self, feats):
        return self.linear((feats - self.mean) / self.std)


def fit_linear_head(feats: torch.Tensor, labels, num_classes: int, config: EvalConfig, seed: int) -> LinearHead:
    """Full-batch Adam on multinomial cross-entropy for a fixed step budget."""
    feats = feats.detach().double()
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    mean = feats.mean(0)
    std = feats.std(0, unbiased=False).clamp_min(1e-8)
    head = LinearHead(mean, std, num_classes, torch.Generator().manual_seed(_seed_int(seed, 11)))
    opt = torch.optim.Adam(head.parameters(), lr=config.probe_lr, weight_decay=config.probe_weight_decay)
    for _ in range(config.probe_steps):
        opt.zero_grad()
        F.cross_entropy(head(feats), y).backward()
        opt.step()
    return head


def _predict(head, feats) -> np.ndarray:
    with torch.no_grad():
        return head(feats).argmax(1).numpy()


def linear_probe(
    models,
    dataset: SyntheticDataset,
    train_idx,
    test_idx,
    seed: int = 0,
    config: EvalConfig | None = None,
    modalities: Sequence[int] | None = None,
    variant: str = "",
    return_head: bool = False,
):
    """Frozen encoders, h of every modality concatenated, affine classifier."""
    config = (config or EvalConfig()).validate()
    modalities = list(range(len(models))) if modalities is None else list(modalities)
    for idx in (train_idx, test_idx):
        _check_labels(dataset, idx)
    before = [parameter_hash(m.parameters()) for m in models]
    with torch.no_grad():
        train_f = _features(models, dataset, train_idx, modalities)
        test_f = _features(models, dataset, test_idx, modalities)
    k = dataset.config.num_classes
    head = fit_linear_head(train_f, dataset.label[train_idx], k, config, seed)
    if [parameter_hash(m.parameters()) for m in models] != before:
        raise AssertionError("linear probing modified encoder parameters")
    result = ProbeResult.from_predictions(_predict(head, test_f), dataset.label[test_idx], k, seed, variant)
    return (result, head) if return_head else result


def finetune_eval(
    models,
    dataset: SyntheticDataset,
    train_idx,
    test_idx,
    seed: int = 0,
    config: EvalConfig | None = None,
    modalities: Sequence[int] | None = None,
    variant: str = "",
) -> ProbeResult:
    """Start from the probe head, then train encoders (lr / 10) and head together."""
    config = (config or EvalConfig()).validate()
    modalities = list(range(len(models))) if modalities is None else list(modalities)
    probe, head = linear_probe(models, dataset, train_idx, test_idx, seed, config, modalities, variant, True)
    if config.finetune_steps == 0:
        return probe
    tuned = [copy.deepcopy(m).double() for m in models]
    y = torch.as_tensor(dataset.label[train_idx], dtype=torch.long)
    enc = [p for m in modalities for p in tuned[m].parameters()]
    opt = torch.optim.Adam(
        [
            {"params": list(head.parameters()), "lr": config.probe_lr},
            {"params": enc, "lr": config.probe_lr / 10},
        ],
        weight_decay=config.probe_weight_decay,
    )
    for _ in range(config.finetune_steps):
        opt.zero_grad()
        F.cross_entropy(head(_features(tuned, dataset, train_idx, modalities)), y).backward()
        opt.step()
    with torch.no_grad():
        pred = _predict(head, _features(tuned, dataset, test_idx, modalities))
    return ProbeResult.from_predictions(pred, dataset.label[test_idx], dataset.config.num_classes, seed, variant)


def oracle_probe(dataset: SyntheticDataset, train_idx, test_idx, seed=0, config=None) -> ProbeResult:
    """Probe the ground-truth shared latents directly, bypassing any encoder."""
    config = (config or EvalConfig()).validate()
    k = dataset.config.num_classes
    feats = torch.from_numpy(dataset.shared_latent)
    head = fit_linear_head(feats[train_idx], dataset.label[train_idx], k, config, seed)
    return ProbeResult.from_predictions(_predict(head, feats[test_idx]), dataset.label[test_idx], k, seed, "oracle")


# ------------------------------------------------------------------ variants


def run_variant(
    spec: VariantSpec | str,
    dataset: SyntheticDataset,
    model_config: ModelConfig,
    pretrain: TrainConfig,
    align: TrainConfig,
    unimodal_models: list | None = None,
    on_step: Callable[[dict], None] | None = None,
):
    """Train the models behind one variant tag and return them."""
    spec = VariantSpec(spec) if isinstance(spec, str) else spec
    cfg = spec.align_config(align)
    if spec.tag == "joint":
        return joint_pretrain(dataset, model_config, cfg, on_step)
    if unimodal_models is None:
        unimodal_models = pretrain_unimodal(dataset, model_config, pretrain, on_step)
    if spec.tag == "concat":
        return unimodal_models
    return align_crossmodal(dataset, unimodal_models, cfg, on_step)


@dataclass
class SweepCell:
    ratio: float
    variant: str
    seed: int
    result: ProbeResult


def pair_ratio_sweep(
    world: WorldConfig,
    ratios: Iterable[float],
    variants: Iterable[str],
    seeds: Iterable[int],
    model_config: ModelConfig,
    pretrain: TrainConfig,
    align: TrainConfig,
    eval_config: EvalConfig | None = None,
    on_cell: Callable[[SweepCell], None] | None = None,
    extra_probes: dict | None = None,
) -> list[SweepCell]:
    """Every (ratio, variant, seed) cell end to end; Stage 1 is shared across ratios.

    ``extra_probes`` maps a name to a list of modality indices; for every
    trained cell an additional probe on those modalities is recorded under
    the variant name ``f"{variant}@{name}"``. Stage-1 models get the same
    probes under ``"unimodal@{name}"``.
    """
    eval_config = (eval_config or EvalConfig()).validate()
    ratios, variants = list(ratios), [VariantSpec(v).tag for v in variants]
    for r in ratios:
        if not 0.0 < r <= 1.0:
            raise ValueError(f"pair ratio {r} outside (0,1]")
    cells = []

    def emit(cell):
        cells.append(cell)
        if on_cell is not None:
            on_cell(cell)

    for seed in seeds:
        base = generate_world(replace(world, pair_ratio=ratios[0]), seed)
        train_idx, test_idx = labeled_split(base, eval_config.test_fraction)
        stage1 = None
        if any(v != "joint" for v in variants):
            stage1 = pretrain_unimodal(base, model_config, replace(pretrain, seed=seed))
            for name, mods in (extra_probes or {}).items():
                res = linear_probe(stage1, base, train_idx, test_idx, seed, eval_config, mods, f"unimodal@{name}")
                emit(SweepCell(float("nan"), res.variant, seed, res))
        for r in ratios:
            ds = base if r == ratios[0] else base.with_pair_ratio(r)
            for v in variants:
                models = run_variant(v, ds, model_config, pretrain, replace(align, seed=seed), stage1)
                res = linear_probe(models, ds, train_idx, test_idx, seed, eval_config, variant=v)
                emit(SweepCell(r, v, seed, res))
                for name, mods in (extra_probes or {}).items():
                    res = linear_probe(models, ds, train_idx, test_idx, seed, eval_config, mods, f"{v}@{name}")
                    emit(SweepCell(r, res.variant, seed, res))
    return cells


# ------------------------------------------------------------------ tables

RESULT_HEADER = ("ratio", "variant", "seed", "accuracy", "macro_f1")
AGGREGATE_HEADER = ("ratio", "variant", "n", "accuracy_mean", "accuracy_std", "macro_f1_mean", "macro_f1_std")


def write_results(path, cells: Iterable[SweepCell]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(RESULT_HEADER)
        for c in cells:
            w.writerow([repr(float(c.ratio)), c.variant, c.seed, f"{c.result.accuracy:.6f}", f"{c.result.macro_f1:.6f}"])
    return path


@dataclass
class ResultRow:
    ratio: float
    variant: str
    seed: int
    accuracy: float
    macro_f1: float


def read_results(path) -> list[ResultRow]:
    """Parse a results table; malformed content raises naming the line number."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or tuple(lines[0].split("\t")) != RESULT_HEADER:
        raise ValueError(f"{path}:1: expected header {' '.join(RESULT_HEADER)}")
    rows = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != len(RESULT_HEADER):
            raise ValueError(f"{path}:{n}: expected {len(RESULT_HEADER)} fields, got {len(parts)}")
        try:
            rows.append(ResultRow(float(parts[0]), parts[1], int(parts[2]), float(parts[3]), float(parts[4])))
        except ValueError as exc:
            raise ValueError(f"{path}:{n}: {exc}") from None
    return rows


def aggregate(rows: Iterable[ResultRow]) -> list[dict]:
    """Mean and sample stdev per (ratio, variant); order-independent."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.ratio, r.variant), []).append(r)
    out = []
    for (ratio, variant), members in sorted(groups.items(), key=lambda kv: (np.nan_to_num(kv[0][0], nan=-1.0), kv[0][1])):
        acc = sorted(m.accuracy for m in members)
        f1 = sorted(m.macro_f1 for m in members)
        out.append(
            {
                "ratio": ratio,
                "variant": variant,
                "n": len(members),
                "accuracy_mean": statistics.fmean(acc),
                "accuracy_std": statistics.stdev(acc) if len(acc) > 1 else 0.0,
                "macro_f1_mean": statistics.fmean(f1),
                "macro_f1_std": statistics.stdev(f1) if len(f1) > 1 else 0.0,
            }
        )
    return out


def write_aggregate(path, rows: Iterable[ResultRow]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(AGGREGATE_HEADER)
        for a in aggregate(rows):
            w.writerow([repr(float(a["ratio"])), a["variant"], a["n"]] + [f"{a[k]:.6f}" for k in AGGREGATE_HEADER[3:]])
    return path


def cells_to_rows(cells: Iterable[SweepCell]) -> list[ResultRow]:
    return [ResultRow(c.ratio, c.variant, c.seed, c.result.accuracy, c.result.macro_f1) for c in cells]


def median_accuracy(rows: Iterable[ResultRow], variant: str, ratio: float | None = None) -> float:
    acc = [r.accuracy for r in rows if r.variant == variant and (ratio is None or r.ratio == ratio)]
    if not acc:
        raise KeyError(f"no results for variant {variant!r} at ratio {ratio}")
    return float(np.median(acc))


def ratio_trend(rows: Iterable[ResultRow], variant: str = "full") -> float:
    """Spearman correlation between pair ratio and the seed-mean accuracy."""
    means = {a["ratio"]: a["accuracy_mean"] for a in aggregate(rows) if a["variant"] == variant}
    ratios = sorted(means)
    if len(ratios) < 2:
        raise ValueError("need at least two ratios for a trend")
    acc = [means[r] for r in ratios]
    if len(set(acc)) == 1:
        return 0.0  # a flat curve carries no trend
    return float(spearmanr(ratios, acc).statistic)
