"""Entropy production rates of reactions and diffusion.

Rates are per cell; ``k_B`` defaults to 1 (natural units). Both channels are
built from differentiable ops so they can feed losses directly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dense_rdn import crn as crn_mod
from dense_rdn.crn import CrnSpec
from dense_rdn.diffcore import Tensor, ops
from dense_rdn.diffcore.tensor import as_tensor

RATE_FLOOR = 1e-5
DIFFUSION_STABILIZER = 0.1


@dataclass
class EntropyRates:
    sigma_rxn: Tensor
    sigma_dif: Tensor
    k_B: float = 1.0

    @property
    def sigma_tot(self) -> Tensor:
        return self.sigma_rxn + self.sigma_dif


def sigma_rxn(x, crn: CrnSpec, k, k_B: float = 1.0) -> Tensor:
    """``k_B sum_j (nu+ - nu-) ln(nu+/nu-)`` per cell, rates floored at 1e-5.

    ``x``: [B, S, U, V]; ``k``: directed rates [2R]. Returns [B, U, V].
    """
    nu = ops.maximum(crn_mod.reaction_rates(x, crn, k), RATE_FLOOR)
    r = crn.n_reversible
    fwd, rev = nu[:, :r], nu[:, r:]
    terms = (fwd - rev) * (ops.log(fwd) - ops.log(rev))
    return terms.sum(axis=1) * k_B


def _central_gradient_sq(x, h: float) -> Tensor:
    gu = (ops.roll(x, -1, axis=2) - ops.roll(x, 1, axis=2)) * (1.0 / (2.0 * h))
    gv = (ops.roll(x, -1, axis=3) - ops.roll(x, 1, axis=3)) * (1.0 / (2.0 * h))
    return gu * gu + gv * gv


def sigma_dif(x, D, h: float, k_B: float = 1.0) -> Tensor:
    """``k_B sum_i D_i |grad X^i|^2 / (X^i + 0.1)`` per cell (central differences)."""
    x = as_tensor(x)
    D = as_tensor(D)
    d = ops.reshape(D, (1, D.shape[0], 1, 1))
    terms = d * _central_gradient_sq(x, h) / (x + DIFFUSION_STABILIZER)
    return terms.sum(axis=1) * k_B


def entropy_rates(x, params, k_B: float = 1.0, k=None) -> EntropyRates:
    if k is None:
        k = params.rate_vector()
    return EntropyRates(sigma_rxn(x, params.crn, k, k_B), sigma_dif(x, params.D, params.h, k_B), k_B)


@dataclass
class EntropySummary:
    sigma_rxn: Tensor
    sigma_dif: Tensor
    sigma_tot: Tensor

    def as_floats(self) -> tuple[float, float, float]:
        return self.sigma_rxn.item(), self.sigma_dif.item(), self.sigma_tot.item()


def mean_entropy_rates(traj, params, k_B: float = 1.0) -> EntropySummary:
    """Means of the instantaneous rates over cells, batch and recorded states."""
    if not traj.states:
        raise ValueError("empty trajectory")
    k = params.rate_vector()
    rxn, dif = [], []
    for x in traj.states:
        rxn.append(sigma_rxn(x, params.crn, k, k_B).mean())
        dif.append(sigma_dif(x, params.D, params.h, k_B).mean())
    r = ops.stack(rxn).mean()
    d = ops.stack(dif).mean()
    return EntropySummary(r, d, r + d)


def entropy_series(traj, params, k_B: float = 1.0) -> np.ndarray:
    """Rows ``(t, mean sigma_rxn, mean sigma_dif, mean sigma_tot)`` per recorded state (values only)."""
    k = params.rate_vector().value
    rows = []
    for t, x in zip(traj.state_times, traj.states):
        xv = Tensor(x.value)
        r = float(sigma_rxn(xv, params.crn, k, k_B).value.mean())
        d = float(sigma_dif(xv, Tensor(as_tensor(params.D).value), params.h, k_B).value.mean())
        rows.append((t * traj.dt, r, d, r + d))
    return np.array(rows).reshape(-1, 4)


def write_entropy_csv(path, traj, params, k_B: float = 1.0) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "sigma_rxn", "sigma_dif", "sigma_tot"])
        for row in entropy_series(traj, params, k_B):
            w.writerow([repr(float(v)) for v in row])
    return path
