"""From-scratch segmentation network: layers, model assembly, checkpoints."""

from .layers import NORM_EPS, ShapeError, layer_apply, layer_grad
from .model import (
    ModelConfig,
    NonFiniteActivationError,
    backward,
    bce_loss_and_grad,
    build_model,
    build_plan,
    forward,
    parameter_count,
    predict_mask,
)
from .checkpoint import (
    BadMagicError,
    Checkpoint,
    CheckpointError,
    ShapeMismatchError,
    TruncatedCheckpointError,
    load_checkpoint,
    save_checkpoint,
)

__all__ = [
    "NORM_EPS",
    "ShapeError",
    "layer_apply",
    "layer_grad",
    "ModelConfig",
    "NonFiniteActivationError",
    "backward",
    "bce_loss_and_grad",
    "build_model",
    "build_plan",
    "forward",
    "parameter_count",
    "predict_mask",
    "BadMagicError",
    "Checkpoint",
    "CheckpointError",
    "ShapeMismatchError",
    "TruncatedCheckpointError",
    "load_checkpoint",
    "save_checkpoint",
]
