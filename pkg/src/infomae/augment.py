"""Shape-preserving spectrogram augmentations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KINDS = (
    "amplitude_scale",
    "additive_gaussian_noise",
    "time_interval_mask",
    "frequency_band_mask",
    "interval_shift",
)


@dataclass(frozen=True)
class Transform:
    kind: str
    param: tuple | float | int
    prob: float = 1.0

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"{self.kind}: prob must be in [0,1], got {self.prob}")
        if self.kind == "amplitude_scale":
            lo, hi = self.param
            if lo > hi:
                raise ValueError(f"amplitude_scale: empty range {self.param}")
        elif self.kind in ("time_interval_mask", "frequency_band_mask"):
            if not 0.0 <= float(self.param) <= 1.0:
                raise ValueError(f"{self.kind}: max_fraction must be in [0,1], got {self.param}")
        elif float(self.param) < 0:
            raise ValueError(f"{self.kind}: parameter must be >= 0, got {self.param}")


@dataclass(frozen=True)
class AugmentPolicy:
    transforms: tuple = field(default_factory=tuple)

    def __post_init__(self):
        for t in self.transforms:
            t.validate()

    @classmethod
    def default(cls) -> "AugmentPolicy":
        return cls(
            (
                Transform("amplitude_scale", (0.8, 1.2), 0.8),
                Transform("additive_gaussian_noise", 0.05, 0.8),
                Transform("time_interval_mask", 0.25, 0.5),
                Transform("frequency_band_mask", 0.25, 0.5),
            )
        )

    @classmethod
    def from_list(cls, items) -> "AugmentPolicy":
        out = []
        for item in items:
            if not isinstance(item, dict) or not {"kind", "param"} <= set(item) or set(item) - {"kind", "param", "prob"}:
                raise ValueError(f"augment entry {item!r} must be a mapping with kind, param and optional prob")
            param = item["param"]
            if isinstance(param, list):
                param = tuple(param)
            out.append(Transform(item["kind"], param, float(item.get("prob", 1.0))))
        return cls(tuple(out))

    def to_list(self) -> list[dict]:
        return [
            {"kind": t.kind, "param": list(t.param) if isinstance(t.param, tuple) else t.param, "prob": t.prob}
            for t in self.transforms
        ]


def _band_mask(x, axis, max_fraction, apply, rng):
    n = x.shape[axis]
    widths = np.floor(rng.random(len(x)) * max_fraction * n).astype(int)
    starts = (rng.random(len(x)) * (n - widths + 1)).astype(int)
    pos = np.arange(n)
    hit = (pos[None, :] >= starts[:, None]) & (pos[None, :] < (starts + widths)[:, None])
    hit &= apply[:, None]
    shape = [len(x), 1, 1, 1]
    shape[axis] = n
    return np.where(hit.reshape(shape), 0.0, x)


def augment_batch(x: np.ndarray, policy: AugmentPolicy, rng) -> np.ndarray:
    """Apply ``policy`` independently to every sample of a (N, C, I, S) batch."""
    rng = np.random.default_rng(rng)
    out = np.array(x, dtype=np.float64, copy=True)
    n = len(out)
    for t in policy.transforms:
        apply = rng.random(n) < t.prob
        if t.kind == "amplitude_scale":
            lo, hi = t.param
            scale = np.where(apply, rng.uniform(lo, hi, size=n), 1.0)
            out = out * scale[:, None, None, None]
        elif t.kind == "additive_gaussian_noise":
            noise = rng.standard_normal(out.shape) * float(t.param)
            out = out + noise * apply[:, None, None, None]
        elif t.kind == "time_interval_mask":
            out = _band_mask(out, 2, float(t.param), apply, rng)
        elif t.kind == "frequency_band_mask":
            out = _band_mask(out, 3, float(t.param), apply, rng)
        elif t.kind == "interval_shift":
            offsets = rng.integers(-int(t.param), int(t.param) + 1, size=n) * apply
            out = np.stack([np.roll(s, k, axis=1) for s, k in zip(out, offsets)])
    return out.astype(x.dtype, copy=False)


def augment(record, policy: AugmentPolicy, seed) -> np.ndarray:
    """Augmented copy of ``record.tensor`` (or a bare tensor); deterministic under ``seed``."""
    tensor = getattr(record, "tensor", record)
    return augment_batch(np.asarray(tensor)[None], policy, seed)[0]
