"""Experiment configuration: one YAML document, strict keys, dotted overrides."""

from __future__ import annotations

import hashlib
import typing
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from .augment import AugmentPolicy
from .data import WorldConfig
from .evaluation import ABLATIONS, VARIANTS, EvalConfig
from .info import InfoHyper
from .model import ModelConfig
from .objectives import SslHyper
from .training import TrainConfig

SCHEMA_VERSION = "1"


@dataclass
class WorldSection:
    num_modalities: int = 2
    shared_dim: int = 2
    private_dim: int = 6
    channels: list = field(default_factory=lambda: [1, 1])
    intervals: int = 8
    spectrum: list = field(default_factory=lambda: [8, 8])
    mixing_seed: int = 0
    mixing: str = "gaussian"
    private_scale: float = 1.0
    observation_noise_sigma: float = 0.1
    latent_walk_rho: float = 0.9
    num_sequences: int = 40
    sequence_length: int = 50
    num_classes: int = 4
    labeled_fraction: float = 0.25


@dataclass
class ModelSection:
    patch_shape: list = field(default_factory=lambda: [2, 2])
    embed_dim: int = 32
    encoder_depth: int = 2
    decoder_depth: int = 1
    decoder_dim: int = 32
    shared_dim: int = 4
    private_dim: int = 4
    mask_ratio: float = 0.75


@dataclass
class PretrainSection:
    epochs: int = 10
    batch_size: int = 64
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_fraction: float = 0.1


@dataclass
class AlignSection:
    pair_ratio: float = 0.05
    epochs: int = 30
    batch_size: int = 8
    sequence_length: int = 2
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_fraction: float = 0.1
    disc_lr_multiplier: float = 1.0
    disc_steps_per_encoder_step: int = 1
    freeze_encoder: bool = False
    fresh_heads: bool = False
    augment: list = field(default_factory=lambda: AugmentPolicy.default().to_list())


@dataclass
class InfoSection:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.1
    epsilon: float = 0.1


@dataclass
class SslSection:
    delta: float = 1.0
    lam: float = 0.1
    tau: float = 1.0
    eta: float = 0.1
    margin: float = 1.0
    normalize: bool = False


@dataclass
class EvalSection:
    probe_steps: int = 500
    probe_lr: float = 0.05
    probe_weight_decay: float = 1e-4
    finetune_steps: int = 100
    test_fraction: float = 0.5
    source: str = "align"  # which stage's checkpoints probe/finetune read: pretrain, align, joint


@dataclass
class ExperimentSection:
    name: str = "default"
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    ratios: list = field(default_factory=lambda: [0.05, 0.15, 0.25, 0.5])
    variants: list = field(default_factory=lambda: ["full", "concat", "joint"])
    ablations: list = field(default_factory=lambda: list(ABLATIONS))


@dataclass
class ExperimentConfig:
    schema_version: str = SCHEMA_VERSION
    seed: int = 0
    out: str = "runs"
    world: WorldSection = field(default_factory=WorldSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    align: AlignSection = field(default_factory=AlignSection)
    info: InfoSection = field(default_factory=InfoSection)
    ssl: SslSection = field(default_factory=SslSection)
    eval: EvalSection = field(default_factory=EvalSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    # ---- views onto module configs
    def world_config(self, pair_ratio: float | None = None) -> WorldConfig:
        w = asdict(self.world)
        w["channels"], w["spectrum"] = tuple(w["channels"]), tuple(w["spectrum"])
        return WorldConfig(**w, pair_ratio=self.align.pair_ratio if pair_ratio is None else pair_ratio)

    def model_config(self) -> ModelConfig:
        m = asdict(self.model)
        m["patch_shape"] = tuple(m["patch_shape"])
        return ModelConfig(**m)

    def info_hyper(self) -> InfoHyper:
        return InfoHyper(**asdict(self.info))

    def ssl_hyper(self) -> SslHyper:
        return SslHyper(**asdict(self.ssl))

    def pretrain_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(stage="unimodal", seed=self.seed if seed is None else seed, **asdict(self.pretrain))

    def align_config(self, seed: int | None = None, stage: str = "align") -> TrainConfig:
        a = asdict(self.align)
        a.pop("pair_ratio")
        policy = AugmentPolicy.from_list(a.pop("augment"))
        return TrainConfig(
            stage=stage,
            seed=self.seed if seed is None else seed,
            info=self.info_hyper(),
            ssl=self.ssl_hyper(),
            augment=policy,
            **a,
        )

    def eval_config(self) -> EvalConfig:
        e = asdict(self.eval)
        e.pop("source")
        return EvalConfig(**e)

    def validate(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"schema_version: expected {SCHEMA_VERSION!r}, got {self.schema_version!r}")
        checks = [
            ("world", lambda: self.world_config().validate()),
            ("model", lambda: self.model_config().validate()),
            ("pretrain", lambda: self.pretrain_config().validate()),
            ("align", lambda: self.align_config().validate()),
            ("eval", lambda: self.eval_config().validate()),
        ]
        for section, check in checks:
            try:
                check()
            except ValueError as exc:
                raise ValueError(f"{section}: {exc}") from None
        wc = self.world_config()
        for i in range(wc.num_modalities):
            try:
                self.model_config().validate(wc.tensor_shape(i))
            except ValueError as exc:
                raise ValueError(f"model.patch_shape: {exc}") from None
        if self.eval.source not in ("pretrain", "align", "joint"):
            raise ValueError(f"eval.source must be pretrain, align or joint, got {self.eval.source!r}")
        for v in self.experiment.variants + self.experiment.ablations:
            if v not in VARIANTS:
                raise ValueError(f"experiment.variants: unknown variant {v!r}; expected one of {VARIANTS}")
        for r in self.experiment.ratios:
            if not 0.0 < r <= 1.0:
                raise ValueError(f"experiment.ratios: {r} outside (0,1]")
        if not self.experiment.seeds:
            raise ValueError("experiment.seeds must not be empty")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_yaml().encode()).hexdigest()


# ------------------------------------------------------------------ parsing


def _coerce(value, default, key: str):
    """Check ``value`` against the type of the field's default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise TypeError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise TypeError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if isinstance(value, tuple):
            value = list(value)
        if not isinstance(value, list):
            raise TypeError(f"{key}: expected a list, got {value!r}")
        return value
    return value


def _build(cls, data, prefix: str = ""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise TypeError(f"{prefix or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            hint = " (pairing is set with align.pair_ratio)" if prefix + str(key) == "world.pair_ratio" else ""
            raise KeyError(f"unknown config key {prefix}{key}{hint}")
    instance = cls()
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        default = getattr(instance, name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), data[name], f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(data[name], default, f"{prefix}{name}")
    return replace(instance, **kwargs)


def _set_dotted(tree: dict, dotted: str, value):
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        child = node.setdefault(p, {})
        if not isinstance(child, dict):
            raise KeyError(f"cannot set {dotted}: {p} is not a section")
        node = child
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    """``key.path=value`` with the value parsed as YAML (so 0.05, true, [1, 2] work)."""
    if "=" not in text:
        raise ValueError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ValueError(f"override {text!r} has an empty key")
    return key, yaml.safe_load(raw) if raw.strip() else ""


def parse_config(path=None, overrides=(), text: str | None = None) -> ExperimentConfig:
    """Load a config file (or text), apply dotted overrides, fill defaults, validate."""
    if text is None and path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        text = path.read_text()
    data = yaml.safe_load(text) if text else None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise TypeError("config: top level must be a mapping")
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        _set_dotted(data, key, value)
    return _build(ExperimentConfig, data).validate()


def write_echo(config: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(config.to_yaml())
    return path
