"""Lightweight axial depthwise-separable segmentation network.

A self-contained CPU implementation: rank-4 tensor core with reverse-mode
autodiff, the depthwise/pointwise building blocks, the U-shaped model, Dice
training with Adam, binary metrics, dataset plumbing, checkpoints, and a CLI.
"""

from .errors import (CheckpointError, ConfigError, DataError,
                     InvalidInputError, NonFiniteError, ShapeError,
                     TrainingAborted, ULiteError, UnsupportedKernelError)
from .metrics import ConfusionCounts, binarize, confusion, dice_iou, evaluate
from .model import (ModelConfig, ULiteModel, count_params, gradient_footprint,
                    list_variants, parse_config_file)
from .rng import Rng
from .tensor import Param, Tensor
from .train import Adam, AugmentConfig, TrainConfig, augment, dice_loss, train_loop

__version__ = "0.1.0"

__all__ = [
    "Adam", "AugmentConfig", "CheckpointError", "ConfigError",
    "ConfusionCounts", "DataError", "InvalidInputError", "ModelConfig",
    "NonFiniteError", "Param", "Rng", "ShapeError", "Tensor", "TrainConfig",
    "TrainingAborted", "ULiteError", "ULiteModel", "UnsupportedKernelError",
    "augment", "binarize", "confusion", "count_params", "dice_iou",
    "dice_loss", "evaluate", "gradient_footprint", "list_variants",
    "parse_config_file", "train_loop", "__version__",
]
