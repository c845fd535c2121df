"""Causal-history video restoration on a self-contained reverse-mode engine."""

from . import ops
from .tensor import NEG_INF, NumericalError, ShapeError, Tape, TapeError, Tensor
from .tensor import full, set_checked, uniform, zeros

__all__ = [
    "NEG_INF", "NumericalError", "ShapeError", "Tape", "TapeError", "Tensor",
    "full", "ops", "set_checked", "uniform", "zeros",
]

__version__ = "0.1.0"
