"""Reverse-mode differentiation over dense numpy arrays."""
from . import ops
from .graph import GradCheckReport, Graph, evaluate, finite_difference_check, gradient, relative_error
from .tensor import Tensor, as_tensor, grad

__all__ = [
    "GradCheckReport",
    "Graph",
    "Tensor",
    "as_tensor",
    "evaluate",
    "finite_difference_check",
    "grad",
    "gradient",
    "ops",
    "relative_error",
]
