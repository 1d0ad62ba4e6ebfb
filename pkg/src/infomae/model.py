"""Per-modality masked autoencoder with shared/private projection heads."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn

CHECKPOINT_MAGIC = b"INFOMAE\x00"
CHECKPOINT_VERSION = "1"
STAGES = ("unimodal", "aligned", "joint")


@dataclass
class ModelConfig:
    patch_shape: tuple = (2, 2)
    embed_dim: int = 32
    encoder_depth: int = 2
    decoder_depth: int = 1
    decoder_dim: int = 32
    shared_dim: int = 4
    private_dim: int = 4
    mask_ratio: float = 0.75

    def __post_init__(self):
        self.patch_shape = tuple(int(p) for p in self.patch_shape)

    def validate(self, input_shape=None) -> "ModelConfig":
        if len(self.patch_shape) != 2 or min(self.patch_shape) < 1:
            raise ValueError(f"patch_shape must be two positive ints, got {self.patch_shape}")
        if self.shared_dim < 1 or self.private_dim < 1:
            raise ValueError("shared_dim and private_dim must be >= 1")
        if self.embed_dim < 1 or self.decoder_dim < 1:
            raise ValueError("embed_dim and decoder_dim must be >= 1")
        if self.encoder_depth < 0 or self.decoder_depth < 0:
            raise ValueError("encoder_depth and decoder_depth must be >= 0")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio in [0,1) required, got {self.mask_ratio}")
        if input_shape is not None:
            _, i, s = input_shape
            if i % self.patch_shape[0] or s % self.patch_shape[1]:
                raise ValueError(f"patch_shape {self.patch_shape} does not divide (I, S) = ({i}, {s})")
        return self


# ------------------------------------------------------------------ patches


def _check_divisible(shape, patch_shape):
    i, s = shape[-2], shape[-1]
    pi, ps = patch_shape
    if i % pi or s % ps:
        raise ValueError(f"patch_shape {tuple(patch_shape)} does not divide (I, S) = ({i}, {s})")


def patchify(x: torch.Tensor, patch_shape) -> torch.Tensor:
    """(..., C, I, S) -> (..., P, C*pI*pS), patches in interval-major order."""
    _check_divisible(x.shape, patch_shape)
    *lead, c, i, s = x.shape
    pi, ps = patch_shape
    x = x.reshape(*lead, c, i // pi, pi, s // ps, ps)
    n = len(lead)
    x = x.permute(*range(n), n + 1, n + 3, n, n + 2, n + 4)
    return x.reshape(*lead, (i // pi) * (s // ps), c * pi * ps)


def unpatchify(patches: torch.Tensor, patch_shape, shape) -> torch.Tensor:
    """Inverse of :func:`patchify` for a target (C, I, S)."""
    c, i, s = shape
    pi, ps = patch_shape
    *lead, _, _ = patches.shape
    n = len(lead)
    x = patches.reshape(*lead, i // pi, s // ps, c, pi, ps)
    x = x.permute(*range(n), n + 2, n, n + 3, n + 1, n + 4)
    return x.reshape(*lead, c, i, s)


def num_masked(num_patches: int, ratio: float) -> int:
    # Python's round() is round-half-to-even
    return int(round(ratio * num_patches))


class VisiblePatches(NamedTuple):
    patches: torch.Tensor  # (N, n_visible, patch_len)
    index: torch.Tensor  # (N, n_visible) patch positions


def _generator(seed) -> torch.Generator:
    if isinstance(seed, torch.Generator):
        return seed
    return torch.Generator().manual_seed(int(seed))


def mask_patches(patches: torch.Tensor, ratio: float, seed):
    """Uniform random masking per sample.

    Returns ``(VisiblePatches, mask_index)``; both index sets are sorted.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0,1), got {ratio}")
    squeeze = patches.dim() == 2
    if squeeze:
        patches = patches.unsqueeze(0)
    n, p, _ = patches.shape
    k = num_masked(p, ratio)
    scores = torch.rand(n, p, generator=_generator(seed))
    order = torch.argsort(scores, dim=1)
    mask_index = torch.sort(order[:, :k], dim=1).values
    visible_index = torch.sort(order[:, k:], dim=1).values
    visible = torch.gather(patches, 1, visible_index.unsqueeze(-1).expand(-1, -1, patches.shape[-1]))
    if squeeze:
        return VisiblePatches(visible[0], visible_index[0]), mask_index[0]
    return VisiblePatches(visible, visible_index), mask_index


def all_visible(patches: torch.Tensor) -> VisiblePatches:
    n, p, _ = patches.shape
    return VisiblePatches(patches, torch.arange(p).expand(n, p))


# -------------------------------------------------------------------- model


def sinusoidal_positions(num: int, dim: int) -> torch.Tensor:
    pos = torch.arange(num, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    table = torch.zeros(num, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return table.float()


class ResidualMLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, cond=None):
        h = x if cond is None else x + cond
        return x + self.fc2(torch.nn.functional.gelu(self.fc1(self.norm(h))))


class Projector(nn.Sequential):
    """Two affine layers with a tanh in between."""

    def __init__(self, dim_in: int, hidden: int, dim_out: int):
        super().__init__(nn.Linear(dim_in, hidden), nn.Tanh(), nn.Linear(hidden, dim_out))


@dataclass
class RepBundle:
    u: torch.Tensor
    v: torch.Tensor
    h: torch.Tensor


class ModalityModel(nn.Module):
    """Encoder E_i, projectors F_i^shared / F_i^private and decoder D_i for one modality.

    The encoder embeds each visible patch with a position-specific affine map,
    refines tokens with residual MLP blocks and mean-pools them. The decoder
    maps ``h = u || v`` to one token per patch position, adds a learned mask
    token at masked positions and sinusoidal positions inside every block.
    """

    def __init__(self, input_shape, config: ModelConfig, modality_id: int = 0):
        super().__init__()
        config.validate(input_shape)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.config = config
        self.modality_id = modality_id
        c, i, s = self.input_shape
        pi, ps = config.patch_shape
        self.num_patches = (i // pi) * (s // ps)
        self.patch_len = c * pi * ps
        d, dd = config.embed_dim, config.decoder_dim
        p = self.num_patches

        self.embed_weight = nn.Parameter(torch.randn(p, self.patch_len, d) / math.sqrt(self.patch_len))
        self.embed_bias = nn.Parameter(torch.zeros(p, d))
        self.encoder_blocks = nn.ModuleList(ResidualMLP(d, 2 * d) for _ in range(config.encoder_depth))
        self.encoder_norm = nn.LayerNorm(d)
        self.shared_head = Projector(d, d, config.shared_dim)
        self.private_head = Projector(d, d, config.private_dim)

        self.decoder_in = nn.Linear(config.shared_dim + config.private_dim, p * dd)
        self.mask_token = nn.Parameter(torch.zeros(dd))
        nn.init.normal_(self.mask_token, std=0.02)
        self.decoder_blocks = nn.ModuleList(ResidualMLP(dd, 2 * dd) for _ in range(config.decoder_depth))
        self.decoder_head = nn.Linear(dd, self.patch_len)
        self.register_buffer("decoder_pos", sinusoidal_positions(p, dd), persistent=False)

    # parameter groups ---------------------------------------------------
    def encoder_parameters(self):
        yield self.embed_weight
        yield self.embed_bias
        yield from self.encoder_blocks.parameters()
        yield from self.encoder_norm.parameters()

    def head_parameters(self):
        yield from self.shared_head.parameters()
        yield from self.private_head.parameters()

    def decoder_parameters(self):
        yield from self.decoder_in.parameters()
        yield self.mask_token
        yield from self.decoder_blocks.parameters()
        yield from self.decoder_head.parameters()

    def reset_heads(self, generator: torch.Generator | None = None):
        for layer in list(self.shared_head) + list(self.private_head):
            if isinstance(layer, nn.Linear):
                bound = 1.0 / math.sqrt(layer.in_features)
                with torch.no_grad():
                    layer.weight.uniform_(-bound, bound, generator=generator)
                    layer.bias.uniform_(-bound, bound, generator=generator)

    # forward ------------------------------------------------------------
    def encode(self, visible: VisiblePatches) -> torch.Tensor:
        patches, index = visible
        w = self.embed_weight[index]  # (N, n, patch_len, d)
        tokens = torch.einsum("npk,npkd->npd", patches, w) + self.embed_bias[index]
        for block in self.encoder_blocks:
            tokens = block(tokens)
        pooled = self.encoder_norm(tokens.mean(dim=1))
        _require_finite(pooled, f"modality {self.modality_id} encoder")
        return pooled

    def forward(self, visible: VisiblePatches) -> RepBundle:
        e = self.encode(visible)
        u = self.shared_head(e)
        _require_finite(u, f"modality {self.modality_id} shared projector")
        v = self.private_head(e)
        _require_finite(v, f"modality {self.modality_id} private projector")
        return RepBundle(u, v, torch.cat([u, v], dim=-1))

    def decode(self, h: torch.Tensor, mask_index: torch.Tensor | None = None) -> torch.Tensor:
        expected = self.config.shared_dim + self.config.private_dim
        if h.shape[-1] != expected:
            raise ValueError(f"representation has width {h.shape[-1]}, decoder expects {expected}")
        n = h.shape[0]
        tokens = self.decoder_in(h).reshape(n, self.num_patches, -1)
        if mask_index is not None and mask_index.numel():
            flag = torch.zeros(n, self.num_patches, 1, dtype=tokens.dtype)
            flag.scatter_(1, mask_index.unsqueeze(-1), 1.0)
            tokens = tokens + flag * self.mask_token
        pos = self.decoder_pos.to(tokens.dtype)
        for block in self.decoder_blocks:
            tokens = block(tokens, pos)
        out = unpatchify(self.decoder_head(tokens), self.config.patch_shape, self.input_shape)
        _require_finite(out, f"modality {self.modality_id} decoder")
        return out

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        return patchify(x, self.config.patch_shape)


def _require_finite(t: torch.Tensor, where: str):
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite activations in {where}")


def forward_modality(model: ModalityModel, visible: VisiblePatches) -> RepBundle:
    return model(visible)


def reconstruct(model: ModalityModel, bundle: RepBundle, mask_index=None) -> torch.Tensor:
    return model.decode(bundle.h, mask_index)


def represent(model: ModalityModel, x: torch.Tensor) -> RepBundle:
    """Representation of full (unmasked) inputs."""
    x = x.to(next(model.parameters()).dtype)
    return model(all_visible(model.patchify(x)))


# --------------------------------------------------------------- checkpoint


def save_checkpoint(path, model: ModalityModel, stage: str) -> Path:
    """Manifest JSON + little-endian float32 blobs in one file."""
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
    state = [(name, p.detach().cpu().numpy()) for name, p in model.named_parameters()]
    manifest = {
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "modality_id": model.modality_id,
        "input_shape": list(model.input_shape),
        "model_config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(model.config).items()},
        "params": [{"name": name, "shape": list(arr.shape)} for name, arr in state],
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for _, arr in state:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not an infomae checkpoint")
        (size,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(size).decode("utf-8"))
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')!r}")
    return manifest


def load_checkpoint(path) -> tuple[ModalityModel, str]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    raw = path.read_bytes()
    (size,) = struct.unpack("<I", raw[len(CHECKPOINT_MAGIC) : len(CHECKPOINT_MAGIC) + 4])
    manifest = read_manifest(path)
    offset = len(CHECKPOINT_MAGIC) + 4 + size
    model = ModalityModel(manifest["input_shape"], ModelConfig(**manifest["model_config"]), manifest["modality_id"])
    params = dict(model.named_parameters())
    with torch.no_grad():
        for entry in manifest["params"]:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            blob = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
            offset += 4 * count
            params[entry["name"]].copy_(torch.from_numpy(blob.astype(np.float32).reshape(entry["shape"])))
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return model, manifest["stage"]
