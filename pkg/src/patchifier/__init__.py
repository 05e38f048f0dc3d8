"""Patch-based self-supervised representation learning for mel spectrograms."""

from .config import TrainConfig, load_config
from .errors import ConfigError, DataError, NumericError, PatchifierError
from .model import ModelConfig, Patchifier

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "ModelConfig",
    "NumericError",
    "Patchifier",
    "PatchifierError",
    "TrainConfig",
    "load_config",
]
