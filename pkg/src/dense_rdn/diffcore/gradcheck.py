"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from dense_rdn.diffcore.tensor import NonFiniteError, Tape, Tensor, backward


def analytic_gradient(function: Callable[[Tensor], Tensor], point: np.ndarray) -> np.ndarray:
    tape = Tape()
    x = tape.leaf(point)
    return backward(function(x))[x]


def grad_check(
    function: Callable[[Tensor], Tensor],
    point,
    fd_step: float = 1e-5,
    n_probe: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max over probed coordinates of ``|analytic - central| / (|analytic| + 1e-8)``.

    ``n_probe`` limits the check to that many randomly chosen coordinates,
    which keeps large parameter vectors affordable.
    """
    point = np.array(point, dtype=np.float64)
    analytic = analytic_gradient(function, point).reshape(-1)
    flat = point.reshape(-1)
    coords = np.arange(flat.size)
    if n_probe is not None and n_probe < flat.size:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = np.sort(rng.choice(flat.size, size=n_probe, replace=False))

    worst = 0.0
    for i in coords:
        probe = flat.copy()
        probe[i] = flat[i] + fd_step
        up = function(Tensor(probe.reshape(point.shape))).item()
        probe[i] = flat[i] - fd_step
        down = function(Tensor(probe.reshape(point.shape))).item()
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteError(f"non-finite value while probing coordinate {i}")
        central = (up - down) / (2.0 * fd_step)
        err = abs(analytic[i] - central) / (abs(analytic[i]) + 1e-8)
        worst = max(worst, err)
    return worst


def packed(function: Callable[..., Tensor], arrays) -> tuple[Callable[[Tensor], Tensor], np.ndarray]:
    """Turn ``function(*tensors)`` over several arrays into a function of one flat vector.

    Returns the wrapped function and the concatenated starting point, ready
    for :func:`grad_check`.
    """
    from dense_rdn.diffcore import ops

    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    sizes = [a.size for a in arrays]
    bounds = np.cumsum([0] + sizes)

    def wrapped(flat: Tensor) -> Tensor:
        parts = [ops.reshape(flat[int(lo):int(hi)], a.shape) for lo, hi, a in zip(bounds[:-1], bounds[1:], arrays)]
        return function(*parts)

    point = np.concatenate([a.reshape(-1) for a in arrays]) if arrays else np.zeros(0)
    return wrapped, point


def directional_check(
    function: Callable[[Tensor], Tensor],
    point,
    directions,
    fd_step: float = 1e-6,
) -> float:
    """Max over ``directions`` of ``|g.v - central_v| / (|g.v| + 1e-8)``.

    Central differences along a unit direction mix many coordinates, so the
    comparison is not swamped by rounding on coordinates whose gradient is
    nearly zero (the usual situation for large parameter vectors).
    """
    point = np.array(point, dtype=np.float64)
    g = analytic_gradient(function, point).reshape(-1)
    flat = point.reshape(-1)
    worst = 0.0
    for v in directions:
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        v = v / np.linalg.norm(v)
        up = function(Tensor((flat + fd_step * v).reshape(point.shape))).item()
        down = function(Tensor((flat - fd_step * v).reshape(point.shape))).item()
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteError("non-finite value while probing a direction")
        central = (up - down) / (2.0 * fd_step)
        exact = float(g @ v)
        worst = max(worst, abs(exact - central) / (abs(exact) + 1e-8))
    return worst
