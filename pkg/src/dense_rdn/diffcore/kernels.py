"""Hot numeric kernels with two interchangeable backends.

The rollout spends nearly all of its time in two places: the periodic stencil
convolution (Laplacian, Gaussian blur) and the mass-action rate evaluation.
Both are written twice, once as numba ``@njit`` loops and once as vectorised
numpy. The backend is chosen at import time from ``DENSE_RDN_NUMBA``
(``0``/``off``/``false`` selects numpy) and can be switched at runtime with
:func:`set_backend`. Both backends are deterministic; they agree to rounding
but are not guaranteed bit-identical to each other.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn


# ---------------------------------------------------------------- numpy path


def _np_conv2d_periodic(x, kernel):
    # x: [N, H, W]; kernel odd-sized, cross-correlation with toroidal wrap
    kh, kw = kernel.shape
    ch, cw = kh // 2, kw // 2
    out = np.zeros_like(x)
    for a in range(kh):
        for b in range(kw):
            w = kernel[a, b]
            if w != 0.0:
                out += w * np.roll(x, (ch - a, cw - b), axis=(1, 2))
    return out


def _np_mass_action(x, k, table):
    # x: [B, S, P]; table: [R, 3] indices into species, S means "no factor"
    b, s, p = x.shape
    xp = np.concatenate([x, np.ones((b, 1, p))], axis=1)
    f = xp[:, table, :]  # [B, R, 3, P]
    return k[None, :, None] * (f[:, :, 0] * f[:, :, 1] * f[:, :, 2])


def _np_mass_action_backward(x, k, table, g):
    b, s, p = x.shape
    xp = np.concatenate([x, np.ones((b, 1, p))], axis=1)
    f = xp[:, table, :]
    prod = f[:, :, 0] * f[:, :, 1] * f[:, :, 2]
    gk = np.einsum("brp,brp->r", g, prod)
    gk_scaled = g * k[None, :, None]
    gxp = np.zeros((b, s + 1, p))
    others = ((1, 2), (0, 2), (0, 1))
    for m, (i, j) in enumerate(others):
        contrib = gk_scaled * f[:, :, i] * f[:, :, j]
        # np.add.at keeps accumulation order fixed for repeated indices
        np.add.at(gxp, (slice(None), table[:, m]), contrib)
    return gxp[:, :s], gk


# ---------------------------------------------------------------- numba path


@njit(cache=True)
def _nb_conv2d_periodic(x, kernel):
    n, h, w = x.shape
    kh, kw = kernel.shape
    ch = kh // 2
    cw = kw // 2
    # wrap-pad once so the inner loops are modulo-free and vectorise; taps are
    # accumulated in the same (a, b) order as the numpy path
    xp = np.empty((n, h + 2 * ch, w + 2 * cw))
    for c in range(n):
        for i in range(h + 2 * ch):
            si = (i - ch) % h
            for j in range(w + 2 * cw):
                xp[c, i, j] = x[c, si, (j - cw) % w]
    out = np.zeros_like(x)
    for c in range(n):
        for a in range(kh):
            for b in range(kw):
                wt = kernel[a, b]
                if wt != 0.0:
                    for i in range(h):
                        for j in range(w):
                            out[c, i, j] += wt * xp[c, i + a, j + b]
    return out


@njit(cache=True)
def _nb_mass_action(x, k, table):
    nb, s, p = x.shape
    r = table.shape[0]
    out = np.empty((nb, r, p))
    for bi in range(nb):
        for j in range(r):
            i0 = table[j, 0]
            i1 = table[j, 1]
            i2 = table[j, 2]
            kj = k[j]
            for c in range(p):
                v = kj
                if i0 < s:
                    v *= x[bi, i0, c]
                if i1 < s:
                    v *= x[bi, i1, c]
                if i2 < s:
                    v *= x[bi, i2, c]
                out[bi, j, c] = v
    return out


@njit(cache=True)
def _nb_mass_action_backward(x, k, table, g):
    nb, s, p = x.shape
    r = table.shape[0]
    gx = np.zeros((nb, s, p))
    gk = np.zeros(r)
    for j in range(r):
        i0 = table[j, 0]
        i1 = table[j, 1]
        i2 = table[j, 2]
        kj = k[j]
        acc_k = 0.0
        for bi in range(nb):
            for c in range(p):
                f0 = x[bi, i0, c] if i0 < s else 1.0
                f1 = x[bi, i1, c] if i1 < s else 1.0
                f2 = x[bi, i2, c] if i2 < s else 1.0
                gc = g[bi, j, c]
                acc_k += gc * (f0 * f1 * f2)
                gs = gc * kj
                if i0 < s:
                    gx[bi, i0, c] += gs * (f1 * f2)
                if i1 < s:
                    gx[bi, i1, c] += gs * (f0 * f2)
                if i2 < s:
                    gx[bi, i2, c] += gs * (f0 * f1)
        gk[j] = acc_k
    return gx, gk


# ------------------------------------------------------------------ dispatch

_IMPLS = {
    "numpy": (_np_conv2d_periodic, _np_mass_action, _np_mass_action_backward),
    "numba": (_nb_conv2d_periodic, _nb_mass_action, _nb_mass_action_backward),
}


def _backend_from_env() -> str:
    flag = os.environ.get("DENSE_RDN_NUMBA", "1").strip().lower()
    if flag in ("0", "off", "false", "no") or not HAS_NUMBA:
        return "numpy"
    return "numba"


_backend = _backend_from_env()


def backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in _IMPLS:
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not installed")
    _backend = name


def conv2d_periodic(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Toroidal cross-correlation of every leading slice of ``x`` with ``kernel``."""
    lead = x.shape[:-2]
    x3 = np.ascontiguousarray(x.reshape((-1,) + x.shape[-2:]), dtype=np.float64)
    out = _IMPLS[_backend][0](x3, np.ascontiguousarray(kernel, dtype=np.float64))
    return out.reshape(lead + x.shape[-2:])


def mass_action(x: np.ndarray, k: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Rates ``k_j * prod_m x[table[j, m]]`` over [B, S, ...] -> [B, R, ...]."""
    b, s = x.shape[:2]
    sp = x.shape[2:]
    x3 = np.ascontiguousarray(x.reshape(b, s, -1), dtype=np.float64)
    out = _IMPLS[_backend][1](x3, np.ascontiguousarray(k, dtype=np.float64), table)
    return out.reshape((b, table.shape[0]) + sp)


def mass_action_backward(x, k, table, g):
    b, s = x.shape[:2]
    sp = x.shape[2:]
    x3 = np.ascontiguousarray(x.reshape(b, s, -1), dtype=np.float64)
    g3 = np.ascontiguousarray(g.reshape(b, table.shape[0], -1), dtype=np.float64)
    gx, gk = _IMPLS[_backend][2](x3, np.ascontiguousarray(k, dtype=np.float64), table, g3)
    return gx.reshape(x.shape), gk
