"""Minimal dense-tensor engine with reverse-mode differentiation."""

from . import functional
from .checkpoint import load_checkpoint, save_checkpoint
from .nn import BatchNorm, Conv2d, Linear, Module, Parameter, ReLU, Sequential
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, concat, no_grad, stack, tensor

__all__ = [
    "Adam", "AdamState", "BatchNorm", "Conv2d", "Linear", "Module", "Parameter", "ReLU",
    "Sequential", "Tensor", "adam_step", "concat", "functional", "load_checkpoint",
    "no_grad", "save_checkpoint", "stack", "tensor",
]
