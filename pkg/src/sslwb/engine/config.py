"""Pretraining / finetuning configuration and its validation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

from ..augmentation import AugmentationPolicy
from ..models import EncoderConfig

METHODS = ("simclr", "dino", "mae", "deepcluster", "mixed", "supervised", "none")
SSL_METHODS = ("simclr", "dino", "mae", "deepcluster")

# declared compute caps for a desk-scale run
MAX_BATCH_SIZE = 2048
MAX_INPUT_SIZE = 128


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MethodParams:
    temperature: float = 0.1
    projection_dim: int = 64
    projection_hidden: int = 128
    local_crops: int = 4
    teacher_momentum: float = 0.996
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    center_momentum: float = 0.9
    dino_out_dim: int = 256
    dino_hidden: int = 256
    dino_bottleneck: int = 64
    mask_ratio: float = 0.75
    decoder_dim: int = 64
    decoder_depth: int = 1
    clusters: int | None = None
    kmeans_iters: int = 50
    w_supervised: float = 0.45
    w_ssl: float = 0.55
    mixed_ssl: str = "dino"


@dataclass(frozen=True)
class PretrainConfig:
    method: str = "dino"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_epochs: float = 1.0
    schedule: str = "cosine"
    weight_decay: float = 0.05
    seed: int = 0
    deterministic: bool = True
    split: str = "train"
    checkpoint_every: int = 0
    params: MethodParams = field(default_factory=MethodParams)
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)

    def __post_init__(self):
        validate_pretrain(self)

    @property
    def digest(self) -> bytes:
        return config_digest(self, exclude=("checkpoint_every",))


@dataclass(frozen=True)
class FinetuneConfig:
    num_classes: int
    init: str | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_epochs: float = 1.0
    schedule: str = "cosine"
    weight_decay: float = 0.05
    freeze_backbone: bool = False
    seed: int = 0
    deterministic: bool = True
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy.finetune)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        _check_optim(self)


def _check_optim(cfg):
    if cfg.epochs < 1:
        raise ConfigError("epochs must be >= 1")
    if cfg.batch_size < 1 or cfg.batch_size > MAX_BATCH_SIZE:
        raise ConfigError(f"batch_size must be in [1, {MAX_BATCH_SIZE}]")
    if cfg.lr <= 0 or cfg.weight_decay < 0 or cfg.warmup_epochs < 0:
        raise ConfigError("lr must be positive, weight_decay and warmup non-negative")
    if cfg.schedule not in ("cosine", "constant"):
        raise ConfigError(f"unknown schedule {cfg.schedule!r}")
    if cfg.encoder.input_size > MAX_INPUT_SIZE:
        raise ConfigError(f"input_size above the {MAX_INPUT_SIZE}px budget cap")
    if cfg.policy.global_size != cfg.encoder.input_size:
        raise ConfigError("augmentation global_size must equal the encoder input_size")


def validate_pretrain(cfg: PretrainConfig):
    if cfg.method not in METHODS:
        raise ConfigError(f"unknown method {cfg.method!r}; expected one of {METHODS}")
    _check_optim(cfg)
    p = cfg.params
    if cfg.method == "simclr" and cfg.batch_size < 2:
        raise ConfigError("simclr needs batch_size >= 2")
    if p.temperature <= 0 or p.teacher_temp <= 0 or p.student_temp <= 0:
        raise ConfigError("temperatures must be positive")
    if p.local_crops < 0:
        raise ConfigError("local_crops must be >= 0")
    if not 0 <= p.teacher_momentum <= 1 or not 0 <= p.center_momentum <= 1:
        raise ConfigError("momenta must be in [0, 1]")
    if not 0 <= p.mask_ratio < 1:
        raise ConfigError("mask_ratio must be in [0, 1) so at least one patch stays visible")
    if p.clusters is not None and p.clusters < 2:
        raise ConfigError("clusters must be >= 2")
    if p.w_supervised < 0 or p.w_ssl < 0 or p.w_supervised + p.w_ssl <= 0:
        raise ConfigError("mixed weights must be non-negative and not both zero")
    if p.mixed_ssl != "dino":
        raise ConfigError("mixed pretraining supports the dino SSL branch only")
    if cfg.method == "mae":
        if cfg.encoder.arch != "patch_transformer":
            raise ConfigError("mae requires the patch_transformer encoder")
        if int(p.mask_ratio * cfg.encoder.num_patches) >= cfg.encoder.num_patches:
            raise ConfigError("mask would hide every patch")
    if cfg.method in ("dino", "mixed") and cfg.encoder.arch == "patch_transformer" and p.local_crops:
        if cfg.policy.local_size % cfg.encoder.patch_size:
            raise ConfigError("local crop size must be a multiple of patch_size")
    if cfg.split not in ("train", "val", "test", "all"):
        raise ConfigError(f"unknown split {cfg.split!r}")


# ---------------------------------------------------------------------------
# dict round-trip
# ---------------------------------------------------------------------------


def to_dict(obj) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def from_dict(cls, data: dict[str, Any] | None, **overrides):
    """Build a (nested) config dataclass, rejecting unknown keys."""
    data = dict(data or {})
    data.update({k: v for k, v in overrides.items() if v is not None})
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        if sub is not None and isinstance(value, dict):
            value = from_dict(sub, value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{cls.__name__}: {e}") from None


_NESTED = {
    (PretrainConfig, "encoder"): EncoderConfig,
    (PretrainConfig, "params"): MethodParams,
    (PretrainConfig, "policy"): AugmentationPolicy,
    (FinetuneConfig, "encoder"): EncoderConfig,
    (FinetuneConfig, "policy"): AugmentationPolicy,
}


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_digest(cfg, exclude: tuple[str, ...] = ()) -> bytes:
    d = to_dict(cfg)
    for k in exclude:
        d.pop(k, None)
    return hashlib.sha256(canonical_json(d).encode()).digest()
