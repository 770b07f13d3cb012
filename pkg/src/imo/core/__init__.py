"""Minimal differentiable array engine."""

from . import kernels, ops
from .arrayio import load_array, save_array
from .gradcheck import grad_check, relative_error
from .tensor import (Tape, Tensor, backward, default_dtype, float64_mode, no_grad,
                     set_debug_nans, set_default_dtype)

__all__ = [
    "Tape", "Tensor", "backward", "default_dtype", "float64_mode", "grad_check",
    "kernels", "load_array", "no_grad", "ops", "relative_error", "save_array",
    "set_debug_nans", "set_default_dtype",
]
