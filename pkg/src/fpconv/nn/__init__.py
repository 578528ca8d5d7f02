"""Minimal reverse-mode differentiation core."""

from fpconv.nn import functional
from fpconv.nn.checkpoint import load_checkpoint, save_checkpoint
from fpconv.nn.gradcheck import GradCheckReport, grad_check
from fpconv.nn.layers import BatchNorm, Conv2d, Linear, Module, SharedMLP
from fpconv.nn.optim import SGD, OptimState, cosine_lr, sgd_momentum_step
from fpconv.nn.tensor import Tensor

__all__ = [
    "BatchNorm",
    "Conv2d",
    "GradCheckReport",
    "Linear",
    "Module",
    "OptimState",
    "SGD",
    "SharedMLP",
    "Tensor",
    "cosine_lr",
    "functional",
    "grad_check",
    "load_checkpoint",
    "save_checkpoint",
    "sgd_momentum_step",
]
