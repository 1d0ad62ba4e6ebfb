"""Synthetic multimodal worlds with known shared/private latent structure.

Every modality observes a linear mixture of one shared latent (common to all
modalities at a time index) and its own private latent. Latents follow an AR(1)
walk inside each sequence, so consecutive windows are close and windows from
different sequences are not. A fraction of the time indices is marked as
synchronized (receives a ``pair_id``); everything stays in the unimodal pools.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

SCHEMA_VERSION = "1"


def _per_modality(value, n: int, name: str) -> tuple[int, ...]:
    if isinstance(value, (int, np.integer)):
        return (int(value),) * n
    value = tuple(int(v) for v in value)
    if len(value) != n:
        raise ValueError(f"{name}: expected {n} entries, got {len(value)}")
    return value


@dataclass
class WorldConfig:
    num_modalities: int = 2
    shared_dim: int = 2
    private_dim: int = 6
    channels: tuple = (1, 1)
    intervals: int = 8
    spectrum: tuple = (8, 8)
    mixing_seed: int = 0
    mixing: str = "gaussian"  # or "identity" (requires C*I*S == k + m)
    private_scale: float = 1.0
    observation_noise_sigma: float = 0.1
    latent_walk_rho: float = 0.9
    num_sequences: int = 40
    sequence_length: int = 50
    pair_ratio: float = 0.05
    num_classes: int = 4
    labeled_fraction: float = 0.25

    def __post_init__(self):
        if self.num_modalities < 2:
            raise ValueError(f"num_modalities must be >= 2, got {self.num_modalities}")
        self.channels = _per_modality(self.channels, self.num_modalities, "channels")
        self.spectrum = _per_modality(self.spectrum, self.num_modalities, "spectrum")

    def validate(self) -> "WorldConfig":
        positive = {
            "shared_dim": self.shared_dim,
            "private_dim": self.private_dim,
            "intervals": self.intervals,
            "num_sequences": self.num_sequences,
            "sequence_length": self.sequence_length,
        }
        for name, value in positive.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.num_modalities < 2:
            raise ValueError(f"num_modalities must be >= 2, got {self.num_modalities}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if min(self.channels) < 1 or min(self.spectrum) < 1:
            raise ValueError("channels and spectrum must be >= 1 for every modality")
        if not 0.0 < self.pair_ratio <= 1.0:
            raise ValueError(f"pair_ratio must be in (0,1], got {self.pair_ratio}")
        if not 0.0 <= self.latent_walk_rho < 1.0:
            raise ValueError(f"latent_walk_rho must be in [0,1), got {self.latent_walk_rho}")
        if self.observation_noise_sigma < 0:
            raise ValueError("observation_noise_sigma must be >= 0")
        if not 0.0 <= self.labeled_fraction < 1.0:
            raise ValueError(f"labeled_fraction must be in [0,1), got {self.labeled_fraction}")
        if self.mixing not in ("gaussian", "identity"):
            raise ValueError(f"mixing must be 'gaussian' or 'identity', got {self.mixing!r}")
        latent = self.shared_dim + self.private_dim
        for i, dim in enumerate(self.obs_dims):
            if dim < latent:
                raise ValueError(
                    f"modality {i}: C*I*S = {dim} < shared_dim + private_dim = {latent}"
                )
            if self.mixing == "identity" and dim != latent:
                raise ValueError(f"identity mixing needs C*I*S == {latent} for modality {i}")
        return self

    @property
    def obs_dims(self) -> tuple[int, ...]:
        return tuple(c * self.intervals * s for c, s in zip(self.channels, self.spectrum))

    def tensor_shape(self, modality: int) -> tuple[int, int, int]:
        return (self.channels[modality], self.intervals, self.spectrum[modality])

    @property
    def num_windows(self) -> int:
        return self.num_sequences * self.sequence_length


def paired_count(pair_ratio: float, num_indices: int) -> int:
    """Ceiling of ``pair_ratio * num_indices`` using the decimal value of the ratio.

    >>> paired_count(0.05, 39609)
    1981
    >>> paired_count(0.05, 2000)
    100
    """
    return math.ceil(Fraction(repr(float(pair_ratio))) * num_indices)


@dataclass
class SampleRecord:
    modality_id: int
    tensor: np.ndarray
    sequence_id: int
    position_in_sequence: int
    pair_id: Optional[int]
    class_label: int
    true_shared_latent: np.ndarray


class UnimodalPool:
    """Read-only view of one modality with no access to pairing information."""

    def __init__(self, tensors: np.ndarray, sequence_id: np.ndarray, position: np.ndarray):
        self.tensors = tensors
        self.sequence_id = sequence_id
        self.position = position

    def __len__(self):
        return len(self.tensors)


@dataclass
class SyntheticDataset:
    config: WorldConfig
    seed: int
    tensors: list  # per modality, (N, C, I, S) float32
    sequence_id: np.ndarray
    position: np.ndarray
    label: np.ndarray
    _pair_id: np.ndarray  # (N,), -1 where unpaired
    shared_latent: np.ndarray  # (N, k)
    private_latent: list  # per modality, (N, m)
    labeled_sequences: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def pair_id(self) -> np.ndarray:
        return self._pair_id

    @property
    def num_modalities(self) -> int:
        return len(self.tensors)

    def __len__(self):
        return len(self.sequence_id)

    @property
    def num_pairs(self) -> int:
        return int((self.pair_id >= 0).sum())

    def paired_indices(self) -> np.ndarray:
        """Global time indices of the synchronized set, ordered by pair id."""
        idx = np.flatnonzero(self.pair_id >= 0)
        return idx[np.argsort(self.pair_id[idx], kind="stable")]

    def labeled_indices(self) -> np.ndarray:
        return np.flatnonzero(np.isin(self.sequence_id, self.labeled_sequences))

    def unimodal_pool(self, modality: int) -> UnimodalPool:
        if not 0 <= modality < self.num_modalities:
            raise KeyError(f"dataset has no modality {modality}")
        return UnimodalPool(self.tensors[modality], self.sequence_id, self.position)

    def record(self, modality: int, index: int) -> SampleRecord:
        pid = int(self.pair_id[index])
        return SampleRecord(
            modality_id=modality,
            tensor=self.tensors[modality][index],
            sequence_id=int(self.sequence_id[index]),
            position_in_sequence=int(self.position[index]),
            pair_id=None if pid < 0 else pid,
            class_label=int(self.label[index]),
            true_shared_latent=self.shared_latent[index],
        )

    def with_pair_ratio(self, pair_ratio: float) -> "SyntheticDataset":
        """Same world and latents, re-drawn pairing for another ratio."""
        config = WorldConfig(**{**asdict(self.config), "pair_ratio": pair_ratio}).validate()
        return generate_world(config, self.seed)


def quantize_angle(shared: np.ndarray, num_classes: int) -> np.ndarray:
    """Class label from the angle of the first two shared coordinates."""
    x = shared[:, 0]
    y = shared[:, 1] if shared.shape[1] > 1 else np.zeros_like(x)
    angle = np.arctan2(y, x)  # (-pi, pi]
    bins = np.floor((angle + np.pi) / (2 * np.pi) * num_classes).astype(np.int64)
    return np.mod(bins, num_classes)


def mixing_matrices(config: WorldConfig) -> list[np.ndarray]:
    k, m = config.shared_dim, config.private_dim
    if config.mixing == "identity":
        return [np.eye(k + m) for _ in range(config.num_modalities)]
    rng = np.random.default_rng(config.mixing_seed)
    mats = []
    for dim in config.obs_dims:
        a = rng.standard_normal((dim, k + m)) / math.sqrt(k + m)
        a[:, k:] *= config.private_scale
        mats.append(a)
    return mats


def _latent_walk(rng, num_sequences, length, dim, rho) -> np.ndarray:
    eps = rng.standard_normal((num_sequences, length, dim))
    z = np.empty_like(eps)
    z[:, 0] = eps[:, 0]
    scale = math.sqrt(1.0 - rho * rho)
    for t in range(1, length):
        z[:, t] = rho * z[:, t - 1] + scale * eps[:, t]
    return z


def generate_world(config: WorldConfig, seed: int) -> SyntheticDataset:
    config.validate()
    k, m, M = config.shared_dim, config.private_dim, config.num_modalities
    S, L = config.num_sequences, config.sequence_length
    # independent streams: changing pair_ratio never changes latents or observations
    latent_ss, noise_ss, label_ss, pair_ss = np.random.SeedSequence(seed).spawn(4)
    latent_rng = np.random.default_rng(latent_ss)
    noise_rng = np.random.default_rng(noise_ss)

    z = _latent_walk(latent_rng, S, L, k + M * m, config.latent_walk_rho).reshape(S * L, -1)
    shared = z[:, :k]
    private = [z[:, k + i * m : k + (i + 1) * m] for i in range(M)]

    tensors = []
    for i, a in enumerate(mixing_matrices(config)):
        obs = np.concatenate([shared, private[i]], axis=1) @ a.T
        if config.observation_noise_sigma > 0:
            obs = obs + config.observation_noise_sigma * noise_rng.standard_normal(obs.shape)
        obs = obs.astype(np.float32).reshape((S * L,) + config.tensor_shape(i))
        if not np.all(np.isfinite(obs)):
            raise FloatingPointError(f"non-finite observations for modality {i}; check the config")
        tensors.append(obs)

    sequence_id = np.repeat(np.arange(S), L)
    position = np.tile(np.arange(L), S)

    n_labeled = int(round(config.labeled_fraction * S))
    labeled = np.sort(np.random.default_rng(label_ss).choice(S, size=n_labeled, replace=False))
    pairable = np.flatnonzero(~np.isin(sequence_id, labeled))
    n_pairs = paired_count(config.pair_ratio, len(pairable))
    chosen = np.sort(np.random.default_rng(pair_ss).choice(pairable, size=n_pairs, replace=False))
    pair_id = np.full(S * L, -1, dtype=np.int64)
    pair_id[chosen] = np.arange(n_pairs)

    return SyntheticDataset(
        config=config,
        seed=seed,
        tensors=tensors,
        sequence_id=sequence_id,
        position=position,
        label=quantize_angle(shared, config.num_classes),
        _pair_id=pair_id,
        shared_latent=shared,
        private_latent=private,
        labeled_sequences=labeled.astype(np.int64),
    )


# ---------------------------------------------------------------- sampling


@dataclass
class SequenceBatch:
    modality_id: int
    indices: np.ndarray  # (B, L) global indices
    dataset: SyntheticDataset = field(repr=False)

    @property
    def B(self) -> int:
        return self.indices.shape[0]

    @property
    def L(self) -> int:
        return self.indices.shape[1]

    @property
    def tensors(self) -> np.ndarray:
        return self.dataset.tensors[self.modality_id][self.indices]

    @property
    def sequences(self) -> list[list[SampleRecord]]:
        return [[self.dataset.record(self.modality_id, int(i)) for i in row] for row in self.indices]


@dataclass
class PairedBatch:
    indices: np.ndarray  # (B,) global indices; every modality is present at each index
    dataset: SyntheticDataset = field(repr=False)

    def tensors(self, modality: int) -> np.ndarray:
        return self.dataset.tensors[modality][self.indices]

    @property
    def records(self) -> list[list[SampleRecord]]:
        """Per-modality aligned record lists."""
        return [
            [self.dataset.record(m, int(i)) for i in self.indices]
            for m in range(self.dataset.num_modalities)
        ]


def sample_sequence_batch(dataset: SyntheticDataset, modality_id: int, B: int, L: int, seed) -> SequenceBatch:
    cfg = dataset.config
    if L > cfg.sequence_length:
        raise ValueError(f"sequence length L={L} exceeds available length {cfg.sequence_length}")
    if B > cfg.num_sequences:
        raise ValueError(f"need B={B} distinct sequences, only {cfg.num_sequences} available")
    rng = np.random.default_rng(seed)
    seqs = rng.choice(cfg.num_sequences, size=B, replace=False)
    starts = rng.integers(0, cfg.sequence_length - L + 1, size=B)
    indices = (seqs * cfg.sequence_length + starts)[:, None] + np.arange(L)[None, :]
    return SequenceBatch(modality_id, indices, dataset)


def sample_paired_batch(dataset: SyntheticDataset, B: int, seed) -> PairedBatch:
    available = dataset.paired_indices()
    if B > len(available):
        raise ValueError(f"requested {B} synchronized pairs, only {len(available)} available")
    rng = np.random.default_rng(seed)
    return PairedBatch(rng.choice(available, size=B, replace=False), dataset)


def iter_paired_epoch(dataset: SyntheticDataset, B: int, seed) -> Iterator[PairedBatch]:
    """Full-epoch sampler: every pair exactly once, last partial batch dropped."""
    available = dataset.paired_indices()
    if B > len(available):
        raise ValueError(f"requested {B} synchronized pairs, only {len(available)} available")
    order = np.random.default_rng(seed).permutation(available)
    for start in range(0, len(order) - B + 1, B):
        yield PairedBatch(order[start : start + B], dataset)


def paired_sequences(dataset: SyntheticDataset, L: int) -> dict[int, np.ndarray]:
    """Sequences holding at least L synchronized samples -> their paired indices in time order."""
    idx = dataset.paired_indices()
    idx = idx[np.lexsort((dataset.position[idx], dataset.sequence_id[idx]))]
    out = {}
    for s in np.unique(dataset.sequence_id[idx]):
        members = idx[dataset.sequence_id[idx] == s]
        if len(members) >= L:
            out[int(s)] = members
    return out


def sample_paired_sequence_batch(dataset: SyntheticDataset, B: int, L: int, seed) -> np.ndarray:
    """B groups of L synchronized samples, each group from one sequence.

    Pairs are sparse in time, so a group is L consecutive *synchronized*
    windows of one sequence rather than L adjacent windows. Returns (B, L)
    global indices.
    """
    eligible = paired_sequences(dataset, L)
    if len(eligible) < B:
        raise ValueError(
            f"need B={B} sequences with >= {L} synchronized samples, only {len(eligible)} "
            f"available ({dataset.num_pairs} pairs); use a smaller batch size or sequence length"
        )
    rng = np.random.default_rng(seed)
    keys = np.array(sorted(eligible))
    chosen = rng.choice(keys, size=B, replace=False)
    rows = []
    for s in chosen:
        members = eligible[int(s)]
        start = rng.integers(0, len(members) - L + 1)
        rows.append(members[start : start + L])
    return np.stack(rows)


def labeled_split(dataset: SyntheticDataset, test_fraction: float = 0.5):
    """Train/test global indices over the labeled sequences, split by sequence."""
    seqs = dataset.labeled_sequences
    if len(seqs) < 2:
        raise ValueError("dataset has fewer than 2 labeled sequences; raise labeled_fraction")
    n_test = max(1, int(round(test_fraction * len(seqs))))
    test_seqs, train_seqs = seqs[:n_test], seqs[n_test:]
    train = np.flatnonzero(np.isin(dataset.sequence_id, train_seqs))
    test = np.flatnonzero(np.isin(dataset.sequence_id, test_seqs))
    if np.any(dataset.pair_id[np.concatenate([train, test])] >= 0):
        raise AssertionError("labeled split overlaps the synchronized set")
    return train, test


# ------------------------------------------------------------------ export


INDEX_HEADER = "record_id\toffset\tsequence_id\tposition\tpair_id\tlabel"


def export_dataset(dataset: SyntheticDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    cfg = asdict(dataset.config)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "seed": dataset.seed,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()},
        "counts": {
            "num_records": len(dataset),
            "num_pairs": dataset.num_pairs,
            "num_modalities": dataset.num_modalities,
        },
        "shapes": [list(dataset.config.tensor_shape(i)) for i in range(dataset.num_modalities)],
        "labeled_sequences": [int(s) for s in dataset.labeled_sequences],
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for i, x in enumerate(dataset.tensors):
        flat = np.ascontiguousarray(x.reshape(len(x), -1), dtype="<f4")
        (path / f"modality_{i}.f32").write_bytes(flat.tobytes())
        row_bytes = flat.shape[1] * 4
        lines = [INDEX_HEADER]
        for r in range(len(x)):
            lines.append(
                f"{r}\t{r * row_bytes}\t{dataset.sequence_id[r]}\t{dataset.position[r]}"
                f"\t{dataset.pair_id[r]}\t{dataset.label[r]}"
            )
        (path / f"modality_{i}.index.tsv").write_text("\n".join(lines) + "\n")
        priv = np.ascontiguousarray(dataset.private_latent[i], dtype="<f8")
        (path / f"private_latent_{i}.f64").write_bytes(priv.tobytes())
    shared = np.ascontiguousarray(dataset.shared_latent, dtype="<f8")
    (path / "shared_latent.f64").write_bytes(shared.tobytes())
    return path


def load_dataset(path) -> SyntheticDataset:
    path = Path(path)
    meta_file = path / "meta.json"
    if not meta_file.exists():
        raise FileNotFoundError(f"missing dataset metadata: {meta_file}")
    meta = json.loads(meta_file.read_text())
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported dataset schema {meta.get('schema_version')!r}")
    config = WorldConfig(**meta["config"]).validate()
    n = meta["counts"]["num_records"]
    tensors, private = [], []
    index = None
    for i in range(meta["counts"]["num_modalities"]):
        raw = np.frombuffer((path / f"modality_{i}.f32").read_bytes(), dtype="<f4")
        tensors.append(raw.astype(np.float32).reshape((n,) + tuple(meta["shapes"][i])))
        table = np.loadtxt(path / f"modality_{i}.index.tsv", dtype=np.int64, skiprows=1, ndmin=2)
        if index is None:
            index = table
        elif not np.array_equal(index[:, 2:], table[:, 2:]):
            raise ValueError(f"modality_{i} index disagrees with modality_0 index")
        raw = np.frombuffer((path / f"private_latent_{i}.f64").read_bytes(), dtype="<f8")
        private.append(raw.astype(np.float64).reshape(n, config.private_dim))
    shared = np.frombuffer((path / "shared_latent.f64").read_bytes(), dtype="<f8")
    return SyntheticDataset(
        config=config,
        seed=meta["seed"],
        tensors=tensors,
        sequence_id=index[:, 2].copy(),
        position=index[:, 3].copy(),
        label=index[:, 5].copy(),
        _pair_id=index[:, 4].copy(),
        shared_latent=shared.astype(np.float64).reshape(n, config.shared_dim),
        private_latent=private,
        labeled_sequences=np.array(meta["labeled_sequences"], dtype=np.int64),
    )
