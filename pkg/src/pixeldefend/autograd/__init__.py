"""Minimal reverse-mode differentiation over float64 numpy arrays."""

from . import ops
from .checkpoint import load as load_checkpoint, save as save_checkpoint
from .gradcheck import check_directional, check_gradients, relative_error
from .tensor import ComputationTape, Tensor, as_tensor, backward, grad

__all__ = [
    "ComputationTape",
    "Tensor",
    "as_tensor",
    "backward",
    "grad",
    "ops",
    "check_gradients",
    "check_directional",
    "relative_error",
    "load_checkpoint",
    "save_checkpoint",
]
