"""Minimal reverse-mode automatic differentiation over float64 arrays."""

from dense_rdn.diffcore import kernels, ops
from dense_rdn.diffcore.gradcheck import analytic_gradient, directional_check, grad_check, packed
from dense_rdn.diffcore.ops import OPS, op_forward
from dense_rdn.diffcore.tensor import (
    DiffError,
    GradMap,
    NonFiniteError,
    Tape,
    Tensor,
    UntrackedError,
    as_tensor,
    backward,
)

__all__ = [
    "OPS",
    "DiffError",
    "GradMap",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "UntrackedError",
    "analytic_gradient",
    "as_tensor",
    "backward",
    "directional_check",
    "grad_check",
    "kernels",
    "op_forward",
    "packed",
    "ops",
]
