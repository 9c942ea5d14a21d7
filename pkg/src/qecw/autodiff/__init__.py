"""Small reverse-mode autodiff engine on numpy."""

from . import ops
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .nn import (BatchNorm, Conv1d, Conv2d, Dense, Dropout, Identity, LayerNorm, Module, Parameter, QuantState)
from .optim import AdamW, clip_grad_norm, lr_schedule
from .tensor import Tensor, no_grad

__all__ = [
    "AdamW", "BatchNorm", "Checkpoint", "Conv1d", "Conv2d", "Dense", "Dropout", "Identity", "LayerNorm",
    "Module", "Parameter", "QuantState", "Tensor", "clip_grad_norm", "load_checkpoint", "lr_schedule",
    "no_grad", "ops", "save_checkpoint",
]
