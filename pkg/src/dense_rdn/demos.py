"""Built-in forward-simulation presets."""

from __future__ import annotations

import numpy as np

from dense_rdn.crn import build_dense_crn
from dense_rdn.reactor import ReactorParams

GRAY_SCOTT_SPECIES = ("U1", "V1", "U2", "V2", "P")


def gray_scott_coupled(
    grid: tuple[int, int] = (64, 64),
    seed: int = 0,
    F: float = 0.025,
    k1: float = 0.055,
    k2: float = 0.057,
    coupling: float = 0.005,
) -> tuple[np.ndarray, ReactorParams]:
    """Two Gray-Scott systems sharing a feed, linked by ``V1 <-> V2``.

    Species order is ``U1, V1, U2, V2, P``. Each system is ``U + 2V -> 3V``
    (rate 1) and ``V -> P`` (rate k); the reactor feeds U1 and U2 at
    concentration 1 with flow ``F``. ``D_U = 2 D_V`` as in the classic setup;
    the grid spacing is chosen so these sit inside the admissible D range
    while keeping the usual dimensionless diffusion numbers (about 0.2 and 0.1
    per step). Initial state: uniform ``U = 1, V = 0`` with one seeded square
    per system plus 1% noise.
    """
    crn = build_dense_crn(5)
    r = crn.n_reversible
    k_f, k_r = np.zeros(r), np.zeros(r)
    u1, v1, u2, v2, p = range(5)

    def set_rate(reac, prod, k):
        j, d = crn.index(reac, prod)
        (k_f if d == "f" else k_r)[j] = k

    set_rate((u1, v1, v1), (v1, v1, v1), 1.0)
    set_rate((u2, v2, v2), (v2, v2, v2), 1.0)
    set_rate((v1,), (p,), k1)
    set_rate((v2,), (p,), k2)
    set_rate((v1,), (v2,), coupling)
    set_rate((v2,), (v1,), coupling)
    D = np.array([0.2e-5, 0.1e-5, 0.2e-5, 0.1e-5, 0.1e-5])
    h = float(np.sqrt(0.2e-5 / 0.21))
    feed = np.array([1.0, 0.0, 1.0, 0.0, 0.0])
    params = ReactorParams(crn, k_f, k_r, D, np.array(F), feed, dt=1.0, h=h)

    rng = np.random.default_rng(seed)
    u, v = grid
    x = np.zeros((1, 5, u, v))
    x[0, u1] = 1.0
    x[0, u2] = 1.0
    s = max(2, u // 8)
    for (cu, cv), (ui, vi) in (((u // 3, v // 3), (u1, v1)), ((2 * u // 3, 2 * v // 3), (u2, v2))):
        x[0, ui, cu - s // 2:cu + s // 2, cv - s // 2:cv + s // 2] = 0.5
        x[0, vi, cu - s // 2:cu + s // 2, cv - s // 2:cv + s // 2] = 0.25
    x *= 1.0 + 0.01 * rng.uniform(-1, 1, x.shape)
    return np.clip(x, 0.0, None), params
