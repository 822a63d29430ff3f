"""Segment graspable and contain regions of hand-held containers, using arm and object masks to reweight features."""

from .errors import (
    AcanetError,
    ConfigError,
    EmptyObjectError,
    EncodingError,
    LoadError,
    ShapeError,
    TrainingError,
)
from .model import ACANet, ModelConfig, build_model, count_parameters, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ACANet",
    "AcanetError",
    "ConfigError",
    "EmptyObjectError",
    "EncodingError",
    "LoadError",
    "ModelConfig",
    "ShapeError",
    "TrainingError",
    "build_model",
    "count_parameters",
    "load_checkpoint",
    "save_checkpoint",
]
