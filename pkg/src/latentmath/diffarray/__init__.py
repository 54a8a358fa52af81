"""Small numpy-backed array engine with reverse-mode differentiation."""

from . import functional
from .tensor import NoTape, NotScalar, ShapeMismatch, Tensor, backward, clear_tape, no_grad

__all__ = [
    "NoTape",
    "NotScalar",
    "ShapeMismatch",
    "Tensor",
    "backward",
    "clear_tape",
    "functional",
    "no_grad",
]
