"""Stage 1 unimodal pretraining, Stage 2 cross-modal alignment, and baselines."""

from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentPolicy, augment_batch
from .data import SyntheticDataset, sample_paired_sequence_batch
from .info import DiscriminatorSet, InfoHyper, discriminator_losses, private_tags, shared_tags
from .model import ModalityModel, ModelConfig, mask_patches, represent
from .objectives import AlignmentInputs, LossBreakdown, SslHyper, masked_reconstruction_loss, total_alignment_loss

log = logging.getLogger(__name__)

STAGES = ("unimodal", "align", "joint", "cmc")


@dataclass
class TrainConfig:
    stage: str = "align"
    epochs: int = 30
    batch_size: int = 8
    sequence_length: int = 2
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_fraction: float = 0.1
    disc_lr_multiplier: float = 1.0
    disc_steps_per_encoder_step: int = 1
    seed: int = 0
    info: InfoHyper = field(default_factory=InfoHyper)
    ssl: SslHyper = field(default_factory=SslHyper)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy.default)
    freeze_encoder: bool = False
    fresh_heads: bool = False  # Stage-1 heads feed the decoder, so they are kept
    debug: bool = False

    def validate(self) -> "TrainConfig":
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1 or self.sequence_length < 1:
            raise ValueError("batch_size and sequence_length must be >= 1")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must be in [0,1]")
        if self.disc_steps_per_encoder_step < 1:
            raise ValueError("disc_steps_per_encoder_step must be >= 1")
        self.info.validate()
        self.ssl.validate()
        needs_pairs_in_batch = self.ssl.lam > 0 or self.ssl.eta > 0 or self.info.use_shared or self.info.use_private
        if self.stage != "unimodal" and needs_pairs_in_batch and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 when contrastive, temporal or discriminator terms are active")
        return self


def make_schedule(base_lr: float, warmup_fraction: float, total_steps: int) -> np.ndarray:
    """Learning rate for steps 0..total_steps: linear warmup then half-cosine to 0."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    warmup = math.ceil(warmup_fraction * total_steps)
    steps = np.arange(total_steps + 1, dtype=np.float64)
    lr = np.empty_like(steps)
    if warmup > 0:
        lr[: warmup + 1] = base_lr * steps[: warmup + 1] / warmup
    else:
        lr[0] = base_lr
    if total_steps > warmup:
        rest = steps[warmup:] - warmup
        lr[warmup:] = base_lr * 0.5 * (1.0 + np.cos(np.pi * rest / (total_steps - warmup)))
    return lr


def parameter_hash(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _seed_int(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def new_model(shape, config: ModelConfig, modality: int, seed: int) -> ModalityModel:
    with torch.random.fork_rng():
        torch.manual_seed(_seed_int(seed, modality, 17))
        return ModalityModel(shape, config, modality)


# ------------------------------------------------------------------ state


@dataclass
class TrainState:
    config: TrainConfig
    models: list
    optimizer: torch.optim.Optimizer
    schedule: np.ndarray
    discs: Optional[DiscriminatorSet] = None
    disc_optimizer: Optional[torch.optim.Optimizer] = None
    step: int = 0
    running: dict = field(default_factory=dict)

    @property
    def lr(self) -> float:
        return float(self.schedule[min(self.step, len(self.schedule) - 1)])

    def record(self, breakdown: LossBreakdown):
        for k, v in breakdown.as_record().items():
            n, mean = self.running.get(k, (0, 0.0))
            self.running[k] = (n + 1, mean + (v - mean) / (n + 1))


def _set_lr(opt, lr):
    if opt is None:
        return
    for group in opt.param_groups:
        group["lr"] = lr * group.get("lr_scale", 1.0)


@dataclass
class Batch:
    x: list  # per modality (N, C, I, S) float tensors
    seq_shape: tuple = (0, 0)


def active_disc_tags(info: InfoHyper) -> list[str]:
    tags = []
    if info.use_shared:
        tags += shared_tags()
    if info.use_private and (info.gamma > 0 or info.epsilon > 0):
        tags += private_tags()
    return tags


def _zero_breakdown(total, **raw) -> LossBreakdown:
    zero = total.new_zeros(())
    vals = {k: raw.get(k, zero) for k in LossBreakdown.RAW_KEYS}
    return LossBreakdown(**vals, weighted=dict(vals), weighted_total=total)


def _unimodal_step(state: TrainState, batch: Batch) -> LossBreakdown:
    model = state.models[0]
    cfg = state.config
    x = batch.x[0]
    gen = torch.Generator().manual_seed(_seed_int(cfg.seed, state.step, model.modality_id, 1))
    visible, mask = mask_patches(model.patchify(x), model.config.mask_ratio, gen)
    x_hat = model.decode(model(visible).h, mask)
    recon = masked_reconstruction_loss(x, x_hat, mask, 1.0, model.config.patch_shape)
    loss = cfg.ssl.delta * recon
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite loss term: reconstruction")
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    bd = _zero_breakdown(loss.detach(), reconstruction=recon.detach())
    bd.weighted["reconstruction"] = loss.detach()
    return bd


def _discriminator_phase(state: TrainState, batch: Batch, tags) -> dict:
    cfg = state.config
    with torch.no_grad():
        reps = [represent(m, x) for m, x in zip(state.models, batch.x)]
    values = {"x1": batch.x[0], "x2": batch.x[1]}
    for i, r in enumerate(reps, start=1):
        values[f"u{i}"], values[f"v{i}"] = r.u, r.v
    losses = {}
    for k in range(cfg.disc_steps_per_encoder_step):
        losses = discriminator_losses(state.discs, values, tags, _seed_int(cfg.seed, state.step, k, 2))
        total = sum(losses.values())
        if not torch.isfinite(total):
            bad = [t for t, v in losses.items() if not torch.isfinite(v)]
            raise FloatingPointError(f"non-finite discriminator loss: {bad}")
        state.disc_optimizer.zero_grad()
        total.backward()
        state.disc_optimizer.step()
    state.disc_optimizer.zero_grad(set_to_none=True)
    return {f"disc_{t}": float(v.detach()) for t, v in losses.items()}


def alignment_inputs(models, batch: Batch, cfg: TrainConfig, step: int) -> AlignmentInputs:
    fields = {k: [] for k in ("x", "u", "v", "h", "x_hat", "mask_index", "h_a", "h_b", "patch_shapes")}
    for m, (model, x) in enumerate(zip(models, batch.x)):
        gen = torch.Generator().manual_seed(_seed_int(cfg.seed, step, m, 3))
        visible, mask = mask_patches(model.patchify(x), model.config.mask_ratio, gen)
        x_hat = model.decode(model(visible).h, mask)
        clean = represent(model, x)
        fields["x"].append(x)
        fields["u"].append(clean.u)
        fields["v"].append(clean.v)
        fields["h"].append(clean.h)
        fields["x_hat"].append(x_hat)
        fields["mask_index"].append(mask)
        fields["patch_shapes"].append(model.config.patch_shape)
        if cfg.ssl.lam > 0:
            arr = x.detach().cpu().numpy()
            xa = torch.as_tensor(augment_batch(arr, cfg.augment, _seed_int(cfg.seed, step, m, 4)), dtype=x.dtype)
            xb = torch.as_tensor(augment_batch(arr, cfg.augment, _seed_int(cfg.seed, step, m, 5)), dtype=x.dtype)
            fields["h_a"].append(represent(model, xa).h)
            fields["h_b"].append(represent(model, xb).h)
    return AlignmentInputs(seq_shape=batch.seq_shape, **fields)


def _alignment_step(state: TrainState, batch: Batch):
    cfg = state.config
    tags = active_disc_tags(cfg.info)
    model_params = [p for m in state.models for p in m.parameters()]
    extra = {}
    if tags:
        before = parameter_hash(model_params) if cfg.debug else None
        extra = _discriminator_phase(state, batch, tags)
        if cfg.debug and parameter_hash(model_params) != before:
            raise AssertionError("discriminator phase modified encoder parameters")

    disc_params = list(state.discs.parameters()) if state.discs is not None else []
    before = parameter_hash(disc_params) if cfg.debug else None
    saved = [p.requires_grad for p in disc_params]
    for p in disc_params:
        p.requires_grad_(False)
    try:
        inputs = alignment_inputs(state.models, batch, cfg, state.step)
        bd = total_alignment_loss(inputs, state.discs, cfg.info, cfg.ssl)
        state.optimizer.zero_grad()
        if bd.weighted_total.requires_grad:
            bd.weighted_total.backward()
        else:  # no active term: a zero-gradient step, so only weight decay acts
            for p in model_params:
                if p.requires_grad:
                    p.grad = torch.zeros_like(p)
        if cfg.debug and any(p.grad is not None for p in disc_params):
            raise AssertionError("encoder phase produced discriminator gradients")
        state.optimizer.step()
    finally:
        for p, flag in zip(disc_params, saved):
            p.requires_grad_(flag)
    if cfg.debug and parameter_hash(disc_params) != before:
        raise AssertionError("encoder phase modified discriminator parameters")
    bd.terms.update({k: torch.tensor(v) for k, v in extra.items()})
    return bd


def cmc_loss(h1, h2, tau: float) -> torch.Tensor:
    """Symmetric cross-modal InfoNCE over a batch of synchronized pairs."""
    logits = h1 @ h2.T / tau
    target = torch.arange(len(h1))
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def _cmc_step(state: TrainState, batch: Batch) -> LossBreakdown:
    cfg = state.config
    h1, h2 = (represent(m, x).h for m, x in zip(state.models, batch.x))
    loss = cmc_loss(h1, h2, cfg.ssl.tau)
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite loss term: cmc")
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    bd = _zero_breakdown(loss.detach())
    bd.terms["cmc"] = loss.detach()
    return bd


def training_step(state: TrainState, batch: Batch):
    """One optimisation step at the scheduled learning rate; returns (state, breakdown)."""
    lr = state.lr
    _set_lr(state.optimizer, lr)
    _set_lr(state.disc_optimizer, lr)
    stage = state.config.stage
    if stage == "unimodal":
        bd = _unimodal_step(state, batch)
    elif stage == "cmc":
        bd = _cmc_step(state, batch)
    else:
        bd = _alignment_step(state, batch)
    for model in state.models:
        for name, p in model.named_parameters():
            if not torch.isfinite(p).all():
                raise FloatingPointError(f"non-finite parameter {name} after step {state.step}")
    state.record(bd)
    state.step += 1
    return state, bd


def _metrics_record(state: TrainState, bd: LossBreakdown, lr: float, **extra) -> dict:
    rec = {"step": state.step - 1, "stage": state.config.stage, "lr": lr}
    rec.update(extra)
    rec.update(bd.as_record())
    return rec


# ------------------------------------------------------------------ stages


def pretrain_unimodal(
    dataset: SyntheticDataset,
    model_config: ModelConfig,
    config: TrainConfig,
    on_step: Callable[[dict], None] | None = None,
) -> list[ModalityModel]:
    """Masked reconstruction on each modality's unimodal pool, independently."""
    if config.stage != "unimodal":
        raise ValueError(f"pretrain_unimodal needs stage 'unimodal', got {config.stage!r}")
    config.validate()
    models = []
    for m in range(dataset.config.num_modalities):
        pool = dataset.unimodal_pool(m)
        model = new_model(dataset.config.tensor_shape(m), model_config, m, config.seed)
        n = len(pool)
        bsz = min(config.batch_size, n)
        per_epoch = n // bsz
        total = max(1, config.epochs * per_epoch)
        opt = torch.optim.AdamW(model.parameters(), lr=config.base_lr, weight_decay=config.weight_decay)
        state = TrainState(config, [model], opt, make_schedule(config.base_lr, config.warmup_fraction, total))
        rng = np.random.default_rng(_seed_int(config.seed, m, 6))
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            for b in range(per_epoch):
                idx = np.sort(order[b * bsz : (b + 1) * bsz])
                batch = Batch([torch.from_numpy(pool.tensors[idx])])
                lr = state.lr
                _, bd = training_step(state, batch)
                if on_step is not None:
                    on_step(_metrics_record(state, bd, lr, modality=m, epoch=epoch))
        models.append(model)
    return models


def reconstruction_error(model: ModalityModel, x: np.ndarray, seed: int = 0) -> float:
    """Masked reconstruction loss on ``x`` under a fixed mask draw."""
    with torch.no_grad():
        xt = torch.from_numpy(np.asarray(x))
        visible, mask = mask_patches(model.patchify(xt), model.config.mask_ratio, seed)
        x_hat = model.decode(model(visible).h, mask)
        return float(masked_reconstruction_loss(xt, x_hat, mask, 1.0, model.config.patch_shape))


def steps_per_epoch(dataset: SyntheticDataset, config: TrainConfig) -> int:
    return max(1, dataset.num_pairs // (config.batch_size * config.sequence_length))


def paired_batch(dataset, config, step) -> Batch:
    idx = sample_paired_sequence_batch(
        dataset, config.batch_size, config.sequence_length, _seed_int(config.seed, step, 7)
    )
    flat = idx.reshape(-1)
    return Batch([torch.from_numpy(t[flat]) for t in dataset.tensors], seq_shape=idx.shape)


def make_state(models, config: TrainConfig, total_steps: int) -> TrainState:
    """Optimizers, schedule and (when any information term is active) fresh discriminators."""
    if config.freeze_encoder:
        for model in models:
            for p in model.encoder_parameters():
                p.requires_grad_(False)
    params = [p for m in models for p in m.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=config.base_lr, weight_decay=config.weight_decay)
    schedule = make_schedule(config.base_lr, config.warmup_fraction, total_steps)
    discs = disc_opt = None
    if config.stage not in ("cmc", "unimodal") and active_disc_tags(config.info):
        with torch.random.fork_rng():
            torch.manual_seed(_seed_int(config.seed, 8))
            c = models[0].config
            discs = DiscriminatorSet([m.input_shape for m in models], c.shared_dim, c.private_dim)
        discs = discs.to(next(models[0].parameters()).dtype)
        disc_opt = torch.optim.AdamW(discs.parameters(), lr=config.base_lr, weight_decay=config.weight_decay)
        for group in disc_opt.param_groups:
            group["lr_scale"] = config.disc_lr_multiplier
    return TrainState(config, models, opt, schedule, discs, disc_opt)


def _run_paired_stage(dataset, models, config, on_step) -> tuple[list, Optional[DiscriminatorSet]]:
    if dataset.num_modalities != 2:
        raise ValueError("cross-modal stages are defined for exactly two modalities")
    if dataset.num_pairs == 0:
        raise ValueError("dataset has no synchronized pairs")
    need = config.batch_size * config.sequence_length
    if dataset.num_pairs < need:
        raise ValueError(
            f"only {dataset.num_pairs} synchronized pairs for a batch of {config.batch_size}x"
            f"{config.sequence_length}={need}; use a smaller batch size"
        )
    total = max(1, config.epochs * steps_per_epoch(dataset, config))
    state = make_state(models, config, total)
    for _ in range(config.epochs * steps_per_epoch(dataset, config)):
        batch = paired_batch(dataset, config, state.step)
        lr = state.lr
        _, bd = training_step(state, batch)
        if on_step is not None:
            on_step(_metrics_record(state, bd, lr))
    for model in models:
        for p in model.parameters():
            p.requires_grad_(True)
    return models, state.discs


def align_crossmodal(
    dataset: SyntheticDataset,
    unimodal_models: list,
    config: TrainConfig,
    on_step: Callable[[dict], None] | None = None,
    return_discriminators: bool = False,
):
    """Stage 2: calibrate pretrained encoders on the synchronized set only."""
    if config.stage not in ("align", "cmc"):
        raise ValueError(f"align_crossmodal needs stage 'align' or 'cmc', got {config.stage!r}")
    config.validate()
    models = [copy.deepcopy(m) for m in unimodal_models]
    if config.fresh_heads:
        for m, model in enumerate(models):
            model.reset_heads(torch.Generator().manual_seed(_seed_int(config.seed, m, 9)))
    models, discs = _run_paired_stage(dataset, models, config, on_step)
    return (models, discs) if return_discriminators else models


def joint_pretrain(
    dataset: SyntheticDataset,
    model_config: ModelConfig,
    config: TrainConfig,
    on_step: Callable[[dict], None] | None = None,
) -> list:
    """Same objective and schedule as alignment, from random initialisation."""
    if config.stage != "joint":
        raise ValueError(f"joint_pretrain needs stage 'joint', got {config.stage!r}")
    config.validate()
    models = [new_model(dataset.config.tensor_shape(m), model_config, m, config.seed) for m in range(2)]
    models, _ = _run_paired_stage(dataset, models, config, on_step)
    return models


def mean_shared_distance(models, x1, x2) -> float:
    """Batch mean of ||u1 - u2||^2 on synchronized inputs."""
    with torch.no_grad():
        u1 = represent(models[0], torch.as_tensor(x1)).u
        u2 = represent(models[1], torch.as_tensor(x2)).u
        return float(((u1 - u2) ** 2).sum(-1).mean())
