"""Minimal differentiable array kernel: tensors, ops, scan, optimiser, checkpoints."""

from .gradcheck import GradCheckReport, grad_check
from .optim import Adam, OneCycle
from .params import ParamStore, load_checkpoint, save_checkpoint
from .scan import selective_scan
from .tensor import Tensor, backward, param

__all__ = [
    "Adam", "GradCheckReport", "OneCycle", "ParamStore", "Tensor", "backward", "grad_check",
    "load_checkpoint", "param", "save_checkpoint", "selective_scan",
]
