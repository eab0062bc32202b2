"""Minimal reverse-mode compute core: tensors, layer ops, SGD, grad checks."""

from .gradcheck import GradCheckResult, grad_check
from .optim import sgd_step
from .tensor import Parameter, Tensor, backward, zero_grads
from . import ops

__all__ = [
    "GradCheckResult",
    "Parameter",
    "Tensor",
    "backward",
    "grad_check",
    "ops",
    "sgd_step",
    "zero_grads",
]
