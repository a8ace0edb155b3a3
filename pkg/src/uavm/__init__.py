"""Unified audio-visual Transformer with shared weights, built on a numpy autodiff core."""

from .errors import (
    ConfigError,
    DataError,
    FormatError,
    NumericError,
    NumericInputError,
    ShapeError,
    TapeError,
    UAVMError,
)
from .model import UAVM, ModelConfig, UAVMParams, count_parameters, forward_single, fuse_predictions, infer, init_params
from .data import Dataset, SynthSpec, generate, load_features, save_features
from .trainer import TrainConfig, evaluate, run_training
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "UAVM",
    "ModelConfig",
    "UAVMParams",
    "TrainConfig",
    "SynthSpec",
    "Dataset",
    "init_params",
    "count_parameters",
    "forward_single",
    "fuse_predictions",
    "infer",
    "generate",
    "load_features",
    "save_features",
    "run_training",
    "evaluate",
    "load_checkpoint",
    "save_checkpoint",
    "UAVMError",
    "ConfigError",
    "ShapeError",
    "NumericInputError",
    "NumericError",
    "DataError",
    "FormatError",
    "TapeError",
]
