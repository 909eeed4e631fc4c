"""Minimal reverse-mode autodiff over dense float64 arrays."""
from . import ops
from .functional import (
    PROB_FLOOR,
    cross_entropy,
    kl_divergence,
    kl_rows,
    softmax_with_temperature,
)
from .gradcheck import finite_difference_check
from .tensor import ShapeError, Tape, Tensor, as_tensor, backward, grad_enabled, no_grad, zero_grad

__all__ = [
    "ops",
    "PROB_FLOOR",
    "cross_entropy",
    "kl_divergence",
    "kl_rows",
    "softmax_with_temperature",
    "finite_difference_check",
    "ShapeError",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "grad_enabled",
    "no_grad",
    "zero_grad",
]
