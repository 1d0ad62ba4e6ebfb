"""``infomae <command> --config PATH [--set key=value]... [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path


from .config import ExperimentConfig, parse_config, write_echo
from .data import export_dataset, generate_world, labeled_split, load_dataset
from .evaluation import (
    ProbeResult,
    SweepCell,
    cells_to_rows,
    finetune_eval,
    linear_probe,
    pair_ratio_sweep,
    write_aggregate,
    write_results,
)
from .model import load_checkpoint, save_checkpoint
from .report import build_report
from .training import align_crossmodal, joint_pretrain, pretrain_unimodal

log = logging.getLogger("infomae")

COMMANDS = ("generate", "pretrain", "align", "joint", "probe", "finetune", "sweep", "ablate", "report")
CHECKPOINT_STAGE = {"pretrain": "unimodal", "align": "aligned", "joint": "joint"}
SOURCE_VARIANT = {"pretrain": "concat", "align": "full", "joint": "joint"}


class MissingPrerequisite(RuntimeError):
    def __init__(self, what: str, paths):
        self.paths = [str(p) for p in paths]
        super().__init__(f"missing {what}; expected:\n" + "\n".join(f"  {p}" for p in self.paths))


def run_dir(cfg: ExperimentConfig, command: str, seed: int | None = None) -> Path:
    return Path(cfg.out) / cfg.experiment.name / f"{command}-{cfg.seed if seed is None else seed}"


def blob_hash(data: bytes) -> str:
    """Content hash in the style of git object ids."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def hash_inputs(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            out[str(f)] = blob_hash(f.read_bytes())
    return out


class MetricsWriter:
    def __init__(self, path: Path):
        self.fh = path.open("w", encoding="utf-8")

    def __call__(self, record: dict):
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self):
        self.fh.close()


# ------------------------------------------------------------ prerequisites


def dataset_dir(cfg: ExperimentConfig) -> Path:
    return run_dir(cfg, "generate") / "dataset"


def require_dataset(cfg: ExperimentConfig) -> Path:
    path = dataset_dir(cfg)
    if not (path / "meta.json").exists():
        raise MissingPrerequisite("dataset (run `infomae generate` first)", [path / "meta.json"])
    return path


def checkpoint_paths(cfg: ExperimentConfig, command: str, num_modalities: int) -> list[Path]:
    return [run_dir(cfg, command) / f"modality_{i}.ckpt" for i in range(num_modalities)]


def require_checkpoints(cfg: ExperimentConfig, command: str) -> list[Path]:
    paths = checkpoint_paths(cfg, command, cfg.world.num_modalities)
    missing = [p for p in paths if not p.exists()]
    if missing:
        raise MissingPrerequisite(f"{command} checkpoints (run `infomae {command}` first)", paths)
    return paths


def load_models(paths, expected_stage: str):
    models = []
    for p in paths:
        model, stage = load_checkpoint(p)
        if stage != expected_stage:
            raise ValueError(f"{p}: checkpoint stage {stage!r}, expected {expected_stage!r}")
        models.append(model)
    return models


# ------------------------------------------------------------------ commands


def cmd_generate(cfg, out: Path, metrics) -> list:
    ds = generate_world(cfg.world_config(), cfg.seed)
    export_dataset(ds, out / "dataset")
    metrics({"event": "generate", "num_records": len(ds), "num_pairs": ds.num_pairs, "seed": cfg.seed})
    return []


def cmd_pretrain(cfg, out: Path, metrics) -> list:
    path = require_dataset(cfg)
    ds = load_dataset(path)
    models = pretrain_unimodal(ds, cfg.model_config(), cfg.pretrain_config(), metrics)
    for i, m in enumerate(models):
        save_checkpoint(out / f"modality_{i}.ckpt", m, "unimodal")
    return [path]


def cmd_align(cfg, out: Path, metrics) -> list:
    path = require_dataset(cfg)
    ckpts = require_checkpoints(cfg, "pretrain")
    ds = load_dataset(path)
    models = align_crossmodal(ds, load_models(ckpts, "unimodal"), cfg.align_config(), metrics)
    for i, m in enumerate(models):
        save_checkpoint(out / f"modality_{i}.ckpt", m, "aligned")
    return [path] + ckpts


def cmd_joint(cfg, out: Path, metrics) -> list:
    path = require_dataset(cfg)
    ds = load_dataset(path)
    models = joint_pretrain(ds, cfg.model_config(), cfg.align_config(stage="joint"), metrics)
    for i, m in enumerate(models):
        save_checkpoint(out / f"modality_{i}.ckpt", m, "joint")
    return [path]


def _evaluate(cfg, out: Path, metrics, fn, suffix: str = "") -> list:
    path = require_dataset(cfg)
    source = cfg.eval.source
    ckpts = require_checkpoints(cfg, source)
    ds = load_dataset(path)
    models = load_models(ckpts, CHECKPOINT_STAGE[source])
    train_idx, test_idx = labeled_split(ds, cfg.eval.test_fraction)
    variant = SOURCE_VARIANT[source] + suffix
    result: ProbeResult = fn(models, ds, train_idx, test_idx, cfg.seed, cfg.eval_config(), variant=variant)
    metrics({"event": "probe", "source": source, **asdict(result)})
    write_results(out / "results.tsv", [SweepCell(cfg.align.pair_ratio, variant, cfg.seed, result)])
    return [path] + ckpts


def cmd_probe(cfg, out, metrics):
    return _evaluate(cfg, out, metrics, linear_probe)


def cmd_finetune(cfg, out, metrics):
    return _evaluate(cfg, out, metrics, finetune_eval, ":finetune")


def _sweep(cfg, out: Path, metrics, ratios, variants) -> list:
    def on_cell(cell: SweepCell):
        metrics({"event": "cell", "ratio": cell.ratio, **asdict(cell.result)})

    cells = pair_ratio_sweep(
        cfg.world_config(ratios[0]),
        ratios,
        variants,
        cfg.experiment.seeds,
        cfg.model_config(),
        cfg.pretrain_config(),
        cfg.align_config(),
        cfg.eval_config(),
        on_cell,
    )
    write_results(out / "results.tsv", cells)
    write_aggregate(out / "results_agg.tsv", cells_to_rows(cells))
    build_report([out / "results.tsv"], out)
    return []


def cmd_sweep(cfg, out, metrics):
    return _sweep(cfg, out, metrics, list(cfg.experiment.ratios), list(cfg.experiment.variants))


def cmd_ablate(cfg, out, metrics):
    return _sweep(cfg, out, metrics, [cfg.align.pair_ratio], list(cfg.experiment.ablations))


def cmd_report(cfg, out: Path, metrics, runs=None) -> list:
    root = Path(cfg.out) / cfg.experiment.name
    if runs:
        files = [Path(r) / "results.tsv" for r in runs]
        missing = [f for f in files if not f.exists()]
        if missing:
            raise MissingPrerequisite("results tables", missing)
    else:
        files = sorted(f for f in root.glob("*/results.tsv") if not f.parent.name.startswith("report-"))
        if not files:
            raise MissingPrerequisite("results tables (run sweep, ablate or probe first)", [root / "*" / "results.tsv"])
    written = build_report(files, out)
    metrics({"event": "report", "inputs": [str(f) for f in files], "outputs": sorted(str(p) for p in written.values())})
    return files


HANDLERS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "align": cmd_align,
    "joint": cmd_joint,
    "probe": cmd_probe,
    "finetune": cmd_finetune,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def declared_inputs(command: str, cfg: ExperimentConfig, runs=None) -> list[Path]:
    n = cfg.world.num_modalities
    if command in ("pretrain", "joint"):
        return [dataset_dir(cfg)]
    if command == "align":
        return [dataset_dir(cfg)] + checkpoint_paths(cfg, "pretrain", n)
    if command in ("probe", "finetune"):
        return [dataset_dir(cfg)] + checkpoint_paths(cfg, cfg.eval.source, n)
    if command == "report" and runs:
        return [Path(r) / "results.tsv" for r in runs]
    return []


def dispatch(command: str, cfg: ExperimentConfig, runs=None) -> Path:
    """Run one command into its run directory and return that directory."""
    if command not in HANDLERS:
        raise ValueError(f"unknown command {command!r}; expected one of {COMMANDS}")
    out = run_dir(cfg, command)
    out.mkdir(parents=True, exist_ok=True)
    write_echo(cfg, out / "config.echo")
    started = time.time()
    declared = [p for p in declared_inputs(command, cfg, runs) if p.exists()]
    before = hash_inputs(declared)
    metrics = MetricsWriter(out / "metrics.ndjson")
    try:
        if command == "report":
            inputs = cmd_report(cfg, out, metrics, runs)
        else:
            inputs = HANDLERS[command](cfg, out, metrics)
    finally:
        metrics.close()
    if hash_inputs(declared) != before:
        raise RuntimeError(f"{command} modified its inputs")
    after = hash_inputs(inputs)
    manifest = {
        "command": command,
        "config_hash": cfg.content_hash(),
        "seed": cfg.seed,
        "started": started,
        "finished": time.time(),
        "inputs": after,
    }
    (out / "manifest").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="infomae", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="YAML experiment config (defaults if omitted)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="root directory for runs")
    p.add_argument("--runs", nargs="*", help="report: run directories holding results.tsv")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(("out", str(args.out)))
    try:
        cfg = parse_config(args.config, overrides)
    except (KeyError, TypeError, ValueError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        out = dispatch(args.command, cfg, args.runs)
    except MissingPrerequisite as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # surfaced as a diagnostic, not a traceback
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
