"""Forward model: reactions + flow-reactor drive + diffusion, integrated by forward Euler.

States are tensors of shape [B, S, U, V]: batch, species, rows (vertical,
``U``) and columns (``V``), on a toroidal grid with spacing ``h`` metres.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from dense_rdn import crn as crn_mod
from dense_rdn.crn import CrnSpec
from dense_rdn.diffcore import NonFiniteError, Tensor, kernels, ops
from dense_rdn.diffcore.tensor import as_tensor

D_MIN = 0.05e-5
D_MAX = 0.2e-5
F_MIN = 0.01
F_MAX = 1.0
_REL_TOL = 1e-9


class SimulationError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class ReactorParams:
    """Kinetic, transport and drive parameters of the reactor.

    Array-valued fields may be numpy arrays or (tracked) tensors. ``D`` is in
    m^2/s, ``f`` in 1/s, ``dt`` in seconds and ``h`` in metres.
    """

    crn: CrnSpec
    k_f: object
    k_r: object
    D: object
    f: object
    feed: object
    dt: float = 1.0
    h: float = 0.01
    noise_amplitude: float = 0.0
    noise_sigma: float = 1.0
    f_pinned: bool = False
    check_bounds: bool = True

    TENSOR_FIELDS = ("k_f", "k_r", "D", "f", "feed")

    def tensors(self) -> list[Tensor]:
        return [as_tensor(getattr(self, name)) for name in self.TENSOR_FIELDS]

    def with_tensors(self, values: Sequence) -> "ReactorParams":
        return replace(self, **dict(zip(self.TENSOR_FIELDS, values)))

    def rate_vector(self) -> Tensor:
        return crn_mod.rate_vector(self.k_f, self.k_r)

    def validate(self) -> None:
        r = self.crn.n_reversible
        s = self.crn.n_species
        k_f, k_r, d, f, feed = (t.value for t in self.tensors())
        if k_f.shape != (r,) or k_r.shape != (r,):
            raise ValueError(f"expected {r} forward and reverse rate constants")
        if d.shape != (s,) or feed.shape != (s,):
            raise ValueError(f"expected {s} diffusion coefficients and feed concentrations")
        if f.size != 1:
            raise ValueError("flow rate must be a scalar")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if np.any(k_f < 0) or np.any(k_r < 0):
            raise ValueError("rate constants must be non-negative")
        if np.any(feed < 0):
            raise ValueError("feed concentrations must be non-negative")
        if self.check_bounds:
            check_diffusion_bounds(d)
            if not self.f_pinned:
                check_flow_bounds(f)


def check_diffusion_bounds(d) -> None:
    d = np.asarray(d)
    lo, hi = D_MIN * (1 - _REL_TOL), D_MAX * (1 + _REL_TOL)
    if np.any(d < lo) or np.any(d > hi):
        raise ValueError(f"diffusion coefficients {d} outside [{D_MIN}, {D_MAX}] m^2/s")


def check_flow_bounds(f) -> None:
    f = float(np.asarray(f).reshape(()))
    if not (F_MIN * (1 - _REL_TOL) <= f <= F_MAX * (1 + _REL_TOL)):
        raise ValueError(f"flow rate {f} outside [{F_MIN}, {F_MAX}] 1/s")


# ------------------------------------------------------------------ stencils


def laplacian_kernel(h: float) -> np.ndarray:
    """Isotropic 9-point Laplacian stencil at grid spacing ``h``."""
    k = np.array([[1.0, 4.0, 1.0], [4.0, -20.0, 4.0], [1.0, 4.0, 1.0]])
    return k / (6.0 * h * h)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised 2D Gaussian truncated at ``ceil(3 sigma)`` cells."""
    if sigma <= 0:
        return np.ones((1, 1))
    r = int(math.ceil(3.0 * sigma))
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def laplacian(field, h: float) -> Tensor:
    return ops.conv2d_periodic(field, laplacian_kernel(h))


def gaussian_blur(field, sigma: float) -> Tensor:
    return ops.conv2d_periodic(field, gaussian_kernel(sigma))


# --------------------------------------------------------------- rate terms


def _per_species(v, n_dims: int = 4) -> Tensor:
    v = as_tensor(v)
    return ops.reshape(v, (1, v.shape[0]) + (1,) * (n_dims - 2))


def diffusion_delta(x, D, h: float, check_bounds: bool = True) -> Tensor:
    """``D_i * lap(X^i)`` per unit time."""
    D = as_tensor(D)
    if check_bounds:
        check_diffusion_bounds(D.value)
    x = as_tensor(x)
    return _per_species(D, x.ndim) * laplacian(x, h)


def sample_flow_noise(rng: np.random.Generator, shape, amplitude: float, filter_sigma: float = 1.0) -> np.ndarray:
    """Unif(0, amplitude) per cell, low-pass filtered with a periodic Gaussian."""
    if amplitude < 0:
        raise ValueError("noise amplitude must be non-negative")
    if amplitude == 0:
        return np.zeros(shape)
    raw = rng.uniform(0.0, amplitude, size=shape)
    return kernels.conv2d_periodic(raw, gaussian_kernel(filter_sigma))


def drive_delta(x, f, feed, noise=None, check_bounds: bool = True) -> Tensor:
    """Flow-reactor exchange ``(f + eps) * (x_i - X^i)`` per unit time.

    ``noise`` has shape [B, 1, U, V] (shared across species) or is ``None``.
    """
    f = as_tensor(f)
    if check_bounds:
        check_flow_bounds(f.value)
    x = as_tensor(x)
    gap = _per_species(feed, x.ndim) - x
    rate = ops.reshape(f, (1,) * x.ndim)
    if noise is not None:
        rate = rate + np.asarray(noise, dtype=np.float64)
    return rate * gap


def step(x, params: ReactorParams, noise=None, k=None):
    """One Euler step; returns ``(X_next, dX, n_clamped)``.

    ``dX`` is the unclamped Euler increment. ``X_next = max(X + dX, 0)`` and
    ``n_clamped`` counts entries that had to be raised to zero.
    """
    x = as_tensor(x)
    if k is None:
        k = params.rate_vector()
    d_rxn = crn_mod.reaction_delta(x, params.crn, k)
    d_drv = drive_delta(x, params.f, params.feed, noise, check_bounds=params.check_bounds and not params.f_pinned)
    d_dif = diffusion_delta(x, params.D, params.h, check_bounds=params.check_bounds)
    dx = (d_rxn + d_drv + d_dif) * params.dt
    raw = x + dx
    n_clamped = int(np.count_nonzero(raw.value < 0))
    return ops.maximum(raw, 0.0), dx, n_clamped


StepTerm = Callable[[Tensor, Tensor], Tensor]


@dataclass
class Trajectory:
    """Recorded time evolution.

    In dense mode ``states`` holds X_0..X_T and ``deltas`` dX_0..dX_{T-1}. In
    recompute-segment mode only segment boundary states are kept (their step
    indices are in ``state_times``) and ``deltas`` is empty; per-step terms
    requested at rollout time are summed into ``step_term_sums``.
    """

    states: list[Tensor]
    deltas: list[Tensor]
    noises: list[np.ndarray | None]
    dt: float
    clamp_events: int = 0
    state_times: list[int] = field(default_factory=list)
    step_term_sums: list[Tensor] = field(default_factory=list)

    @property
    def T(self) -> int:
        return self.state_times[-1] if self.state_times else 0

    @property
    def dense(self) -> bool:
        return len(self.states) == self.T + 1

    @property
    def x0(self) -> Tensor:
        return self.states[0]

    @property
    def final(self) -> Tensor:
        return self.states[-1]


def _noise_fields(rng, params: ReactorParams, shape, T: int):
    if params.noise_amplitude <= 0:
        return [None] * T
    if rng is None:
        raise ValueError("a random generator is required when flow noise is enabled")
    b, _, u, v = shape
    return [sample_flow_noise(rng, (b, 1, u, v), params.noise_amplitude, params.noise_sigma) for _ in range(T)]


def rollout(
    x0,
    params: ReactorParams,
    T: int,
    rng: np.random.Generator | None = None,
    noises: Sequence[np.ndarray | None] | None = None,
    recompute_segments: int | bool | None = None,
    step_terms: Sequence[StepTerm] = (),
) -> Trajectory:
    """Apply :func:`step` ``T`` times from ``x0``.

    Flow noise fields are drawn from ``rng`` up front (one per step) unless
    ``noises`` is given. ``recompute_segments`` (``True`` for ``ceil(sqrt T)``
    steps, or an explicit segment length) checkpoints each segment so only
    boundary states are retained for the backward pass. ``step_terms`` are
    callables ``(X_t, dX_t) -> scalar`` summed over all steps.
    """
    if T < 0:
        raise ValueError("T must be non-negative")
    params.validate()
    x0 = as_tensor(x0)
    if x0.ndim != 4 or x0.shape[1] != params.crn.n_species:
        raise ValueError(f"state must be [B, {params.crn.n_species}, U, V], got {x0.shape}")
    if noises is None:
        noises = _noise_fields(rng, params, x0.shape, T)
    elif len(noises) != T:
        raise ValueError(f"expected {T} noise fields, got {len(noises)}")
    noises = list(noises)
    if recompute_segments:
        seg = int(math.ceil(math.sqrt(T))) if recompute_segments is True else int(recompute_segments)
        return _rollout_segments(x0, params, T, noises, max(seg, 1), step_terms)

    k = params.rate_vector()
    states, deltas = [x0], []
    sums = [None] * len(step_terms)
    clamped = 0
    x = x0
    for t in range(T):
        try:
            x_next, dx, n = step(x, params, noises[t], k)
        except NonFiniteError as exc:
            raise SimulationError(f"numerical blow-up ({exc})", step=t) from exc
        clamped += n
        for i, term in enumerate(step_terms):
            v = term(x, dx)
            sums[i] = v if sums[i] is None else sums[i] + v
        states.append(x_next)
        deltas.append(dx)
        x = x_next
    return Trajectory(
        states, deltas, noises, params.dt, clamped, list(range(T + 1)),
        [s if s is not None else Tensor(0.0) for s in sums],
    )


def _rollout_segments(x0, params, T, noises, seg, step_terms):
    shape = x0.shape
    n_state = int(np.prod(shape))
    n_terms = len(step_terms)
    counter = {"clamped": 0}

    def make_segment(t0: int, t1: int):
        def run(x_flat, k_f, k_r, d, f, feed):
            p = params.with_tensors([k_f, k_r, d, f, feed])
            k = p.rate_vector()
            x = ops.reshape(x_flat, shape)
            sums = [Tensor(0.0)] * n_terms
            for t in range(t0, t1):
                try:
                    x_next, dx, n = step(x, p, noises[t], k)
                except NonFiniteError as exc:
                    raise SimulationError(f"numerical blow-up ({exc})", step=t) from exc
                if x_flat.tape is None:
                    counter["clamped"] += n
                for i, term in enumerate(step_terms):
                    sums[i] = sums[i] + term(x, dx)
                x = x_next
            parts = [ops.reshape(x, (n_state,))] + [ops.reshape(s, (1,)) for s in sums]
            return ops.concat(parts, axis=0)

        return run

    theta = params.tensors()
    x_flat = ops.reshape(x0, (n_state,))
    states, times = [x0], [0]
    totals: list[Tensor | None] = [None] * n_terms
    for t0 in range(0, T, seg):
        t1 = min(T, t0 + seg)
        packed = ops.checkpoint(make_segment(t0, t1), x_flat, *theta)
        x_flat = packed[:n_state]
        states.append(ops.reshape(x_flat, shape))
        times.append(t1)
        for i in range(n_terms):
            v = packed[n_state + i]
            totals[i] = v if totals[i] is None else totals[i] + v
    return Trajectory(
        states, [], noises, params.dt, counter["clamped"], times,
        [s if s is not None else Tensor(0.0) for s in totals],
    )


def total_moles(x) -> float:
    return float(np.sum(as_tensor(x).value))
