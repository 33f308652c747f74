"""Minimal numpy engine: recording ops, layers, AdamW, checkpoints and gradient checks."""

from .checkpoint import Checkpoint, load_checkpoint, restore_params, save_checkpoint
from .gradcheck import GradCheckReport, check_layer_kinds, grad_check
from .layers import (
    GELU,
    LAYER_KINDS,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    Layer,
    LayerSpec,
    MaxPool2,
    Sequential,
    Sigmoid,
    Unflatten,
    Upsample2,
    backward,
    build_layer,
    forward,
)
from .optim import AdamW, adamw_step, clip_grad_norm
from .tensor import Parameter, Tape, Tensor, no_tape

__all__ = [
    "AdamW", "Checkpoint", "Conv2d", "Dense", "Dropout", "Flatten", "GELU", "GradCheckReport",
    "LAYER_KINDS", "Layer", "LayerSpec", "MaxPool2", "Parameter", "Sequential", "Sigmoid", "Tape",
    "Tensor", "Unflatten", "Upsample2", "adamw_step", "backward", "build_layer", "check_layer_kinds",
    "clip_grad_norm", "forward", "grad_check", "load_checkpoint", "no_tape", "restore_params",
    "save_checkpoint",
]
