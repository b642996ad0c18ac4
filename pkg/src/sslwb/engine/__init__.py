"""Training loops, configuration and checkpoint archives."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import METHODS, SSL_METHODS, ConfigError, FinetuneConfig, MethodParams, PretrainConfig
from .train import (
    FinetuneResult,
    ImageData,
    TrainingError,
    TrainingLog,
    finetune,
    predict,
    pretrain,
    pretrain_mixed,
)

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "FinetuneConfig",
    "FinetuneResult",
    "ImageData",
    "METHODS",
    "MethodParams",
    "PretrainConfig",
    "SSL_METHODS",
    "TrainingError",
    "TrainingLog",
    "finetune",
    "load_checkpoint",
    "predict",
    "pretrain",
    "pretrain_mixed",
    "save_checkpoint",
]
