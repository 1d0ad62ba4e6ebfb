"""Reconstruction, augmentation-contrastive and temporal-locality losses, and the total."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .info import InfoHyper, private_info_loss, shared_info_loss
from .model import patchify


@dataclass
class SslHyper:
    delta: float = 1.0
    lam: float = 0.1
    tau: float = 1.0
    eta: float = 0.1
    margin: float = 1.0
    normalize: bool = False  # cosine similarities in the contrastive loss

    def validate(self) -> "SslHyper":
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        for name in ("delta", "lam", "eta", "margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        return self


def masked_reconstruction_loss(x, x_hat, mask_index, delta: float, patch_shape=(1, 1)) -> torch.Tensor:
    """delta * mean squared error over masked patch entries, averaged over the batch.

    ``x``/``x_hat`` are (N, C, I, S); ``mask_index`` is (N, n_masked). With
    ``mask_index=None`` every patch counts (plain autoencoding).
    """
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    err = (patchify(x_hat, patch_shape) - patchify(x, patch_shape)) ** 2  # (N, P, D)
    if mask_index is None:
        return delta * err.mean()
    if mask_index.numel() == 0:
        if delta > 0:
            raise ValueError("reconstruction loss is undefined with an empty mask")
        return err.sum() * 0.0
    picked = torch.gather(err, 1, mask_index.unsqueeze(-1).expand(-1, -1, err.shape[-1]))
    return delta * picked.mean(dim=(1, 2)).mean()


def augmentation_contrastive_loss(H, H_prime, tau: float, lam: float, normalize: bool = False) -> torch.Tensor:
    """InfoNCE between two augmented views.

    H, H_prime: (B, D) or (M, B, D). Anchors are rows of H; the positive is the
    same row of H_prime; negatives are the other rows of H and all other rows
    of H_prime. Averaged over modalities and batch.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if H.shape != H_prime.shape:
        raise ValueError(f"view shapes differ: {tuple(H.shape)} vs {tuple(H_prime.shape)}")
    if H.dim() == 2:
        H, H_prime = H.unsqueeze(0), H_prime.unsqueeze(0)
    if normalize:
        H = torch.nn.functional.normalize(H, dim=-1)
        H_prime = torch.nn.functional.normalize(H_prime, dim=-1)
    b = H.shape[1]
    self_sim = H @ H.transpose(1, 2) / tau
    eye = torch.eye(b, dtype=torch.bool)
    self_sim = self_sim.masked_fill(eye, float("-inf"))
    cross_sim = H @ H_prime.transpose(1, 2) / tau
    logits = torch.cat([self_sim, cross_sim], dim=2)  # (M, B, 2B)
    positive = torch.diagonal(cross_sim, dim1=1, dim2=2)
    return lam * -(positive - torch.logsumexp(logits, dim=2)).mean()


def _pairwise_distance(a, b):
    # exact Euclidean distance with a zero (not NaN) gradient at coincident points
    sq = ((a.unsqueeze(-2) - b.unsqueeze(-3)) ** 2).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def sequence_distances(E) -> torch.Tensor:
    """C[s, s'] = mean over i, j of ||E[s, i] - E[s', j]|| for E of shape (B, L, D)."""
    b, l, d = E.shape
    flat = E.reshape(b * l, d)
    dist = _pairwise_distance(flat, flat).reshape(b, l, b, l)
    return dist.mean(dim=(1, 3))


def temporal_locality_loss(E, eta: float, margin: float = 1.0) -> torch.Tensor:
    """Ranking hinge: intra-sequence distance + margin below every inter-sequence distance.

    E: (B, L, D) for one modality or (M, B, L, D); summed over modalities and
    normalised by the B(B-1) ordered sequence pairs.
    """
    if E.dim() == 3:
        E = E.unsqueeze(0)
    b = E.shape[1]
    if b < 2:
        raise ValueError(f"temporal loss needs B >= 2 sequences, got {b}")
    off = ~torch.eye(b, dtype=torch.bool)
    total = E.new_zeros(())
    for per_modality in E:
        c = sequence_distances(per_modality)
        hinge = torch.relu(torch.diagonal(c)[:, None] - c + margin)
        total = total + hinge[off].sum()
    return eta * total / (b * (b - 1))


@dataclass
class LossBreakdown:
    shared_info: torch.Tensor
    private_info: torch.Tensor
    reconstruction: torch.Tensor
    augmentation: torch.Tensor
    temporal: torch.Tensor
    weighted: dict
    weighted_total: torch.Tensor
    terms: dict = field(default_factory=dict)

    RAW_KEYS = ("shared_info", "private_info", "reconstruction", "augmentation", "temporal")

    def as_record(self) -> dict:
        """Flat float record: raw terms, ``w_``-prefixed weighted terms, info term tags, total."""
        out = {k: float(getattr(self, k).detach()) for k in self.RAW_KEYS}
        out.update({f"w_{k}": float(v.detach()) for k, v in self.weighted.items()})
        out.update({k: float(v.detach()) for k, v in self.terms.items()})
        out["weighted_total"] = float(self.weighted_total.detach())
        return out


@dataclass
class AlignmentInputs:
    """Everything the total objective needs for two modalities.

    Per-modality lists hold: inputs ``x`` (N, C, I, S); clean ``u``/``v``/``h``;
    masked-view reconstructions ``x_hat`` with ``mask_index``; two augmented
    views ``h_a``/``h_b``. ``seq_shape`` = (B, L) reshapes the N clean h into
    sequences for the temporal term.
    """

    x: list
    u: list
    v: list
    h: list
    x_hat: list
    mask_index: list
    h_a: list
    h_b: list
    seq_shape: tuple
    patch_shapes: list


def total_alignment_loss(inp: AlignmentInputs, discs, info: InfoHyper, ssl: SslHyper) -> LossBreakdown:
    zero = inp.h[0].new_zeros(())
    terms = {}
    if info.use_shared:
        shared, t = shared_info_loss(inp.u[0], inp.u[1], inp.x[0], inp.x[1], discs, info)
        terms.update(t)
    else:
        shared = zero
    if info.use_private and (info.gamma > 0 or info.epsilon > 0):
        private, t = private_info_loss(inp.v[0], inp.v[1], inp.u[0], inp.u[1], inp.x[0], inp.x[1], discs, info)
        terms.update(t)
    else:
        private = zero

    recon = zero
    if ssl.delta > 0:
        for x, x_hat, mask, ps in zip(inp.x, inp.x_hat, inp.mask_index, inp.patch_shapes):
            recon = recon + masked_reconstruction_loss(x, x_hat, mask, 1.0, ps)

    aug = zero
    if ssl.lam > 0:
        aug = augmentation_contrastive_loss(torch.stack(inp.h_a), torch.stack(inp.h_b), ssl.tau, 1.0, ssl.normalize)

    temp = zero
    if ssl.eta > 0:
        b, l = inp.seq_shape
        temp = temporal_locality_loss(torch.stack([h.reshape(b, l, -1) for h in inp.h]), 1.0, ssl.margin)

    weighted = {
        "shared_info": shared,
        "private_info": private,
        "reconstruction": ssl.delta * recon,
        "augmentation": ssl.lam * aug,
        "temporal": ssl.eta * temp,
    }
    total = sum(weighted.values(), zero)
    if not torch.isfinite(total):
        bad = [k for k, v in weighted.items() if not torch.isfinite(v)]
        raise FloatingPointError(f"non-finite loss terms: {bad}")
    return LossBreakdown(shared, private, recon, aug, temp, weighted, total, terms)
