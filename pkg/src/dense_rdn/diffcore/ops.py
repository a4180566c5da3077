"""Differentiable operations over :class:`Tensor`.

Every op computes its value eagerly with numpy, checks the result is finite,
and, when any input is tracked, appends one :class:`Record` to the inputs'
tape holding a replayable forward and a backward closure. Arrays needed by a
backward pass are passed through ``Record.saved`` so the tape can account for
them; closures only capture small metadata (shapes, axes, flags).

Kinks (``clamp``, ``maximum``, ``abs``, ``sqrt`` at 0) use subgradient 0 at
the boundary.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from dense_rdn.diffcore import kernels
from dense_rdn.diffcore.tensor import (
    DiffError,
    NonFiniteError,
    Record,
    Tape,
    Tensor,
    as_tensor,
    common_tape,
)


def _check_finite(kind: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{kind}: non-finite output")


def _ref(t: Tensor):
    return ("node", t.node) if t.tape is not None else ("const", t.value)


def _record(kind, inputs, value, forward, backward, saved=()) -> Tensor:
    _check_finite(kind, value)
    tape = common_tape(inputs)
    if tape is None:
        return Tensor(value)
    node = tape.append(Record(kind, tuple(_ref(t) for t in inputs), forward, backward, saved))
    return Tensor(value, tape, node)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bwd(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return _record("add", (a, b), a.value + b.value, np.add, bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bwd(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return _record("sub", (a, b), a.value - b.value, np.subtract, bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    need_a, need_b = a.tracked, b.tracked

    def bwd(g, av, bv):
        ga = unbroadcast(g * bv, sa) if need_a else None
        gb = unbroadcast(g * av, sb) if need_b else None
        return ga, gb

    return _record("mul", (a, b), a.value * b.value, np.multiply, bwd, (a.value, b.value))


def div(a, b, floor: float = 0.0) -> Tensor:
    """``a / b``; raises if any ``|b| <= floor``."""
    a, b = as_tensor(a), as_tensor(b)
    if np.any(np.abs(b.value) <= floor):
        raise DiffError(f"div: denominator at or below floor {floor}")
    sa, sb = a.shape, b.shape
    need_a, need_b = a.tracked, b.tracked

    def bwd(g, av, bv):
        ga = unbroadcast(g / bv, sa) if need_a else None
        gb = unbroadcast(-g * av / (bv * bv), sb) if need_b else None
        return ga, gb

    return _record("div", (a, b), a.value / b.value, np.divide, bwd, (a.value, b.value))


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _record("neg", (x,), -x.value, np.negative, lambda g: (-g,))


def pow_int(x, n: int) -> Tensor:
    if int(n) != n:
        raise DiffError("pow_int needs an integer exponent")
    n = int(n)
    x = as_tensor(x)

    def fwd(v):
        return v**n

    def bwd(g, v):
        if n == 0:
            return (np.zeros_like(v),)
        return (g * n * v ** (n - 1),)

    return _record("pow_int", (x,), fwd(x.value), fwd, bwd, (x.value,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.value)
    return _record("exp", (x,), out, np.exp, lambda g, o: (g * o,), (out,))


def log(x, floor: float = 0.0) -> Tensor:
    """Natural log; raises if any value is at or below ``floor``."""
    x = as_tensor(x)
    if np.any(x.value <= floor):
        raise DiffError(f"log: argument at or below floor {floor}")
    return _record("log", (x,), np.log(x.value), np.log, lambda g, v: (g / v,), (x.value,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.value)
    return _record("tanh", (x,), out, np.tanh, lambda g, o: (g * (1.0 - o * o),), (out,))


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.value)
    return _record("sigmoid", (x,), out, _sigmoid, lambda g, o: (g * o * (1.0 - o),), (out,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.value < 0):
        raise DiffError("sqrt: negative argument")
    out = np.sqrt(x.value)

    def bwd(g, o):
        safe = np.where(o > 0, o, 1.0)
        return (np.where(o > 0, 0.5 * g / safe, 0.0),)

    return _record("sqrt", (x,), out, np.sqrt, bwd, (out,))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    return _record("abs", (x,), np.abs(x.value), np.abs, lambda g, v: (g * np.sign(v),), (x.value,))


def clamp(x, lo: float | None = None, hi: float | None = None) -> Tensor:
    x = as_tensor(x)

    def fwd(v):
        return np.clip(v, lo, hi)

    def bwd(g, v):
        mask = np.ones(v.shape, dtype=bool)
        if lo is not None:
            mask &= v > lo
        if hi is not None:
            mask &= v < hi
        return (g * mask,)

    return _record("clamp", (x,), fwd(x.value), fwd, bwd, (x.value,))


def maximum(x, s: float) -> Tensor:
    """Elementwise ``max(x, s)`` against a scalar."""
    x = as_tensor(x)
    s = float(s)

    def fwd(v):
        return np.maximum(v, s)

    return _record("maximum", (x,), fwd(x.value), fwd, lambda g, v: (g * (v > s),), (x.value,))


def scale_shift(x, scale, shift, axis: int = 1) -> Tensor:
    """``x * scale + shift`` with per-index ``scale``/``shift`` along ``axis``."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    ax = axis % x.ndim
    bshape = [1] * x.ndim
    bshape[ax] = x.shape[ax]
    red = tuple(i for i in range(x.ndim) if i != ax)

    def fwd(v, s, b):
        return v * s.reshape(bshape) + b.reshape(bshape)

    def bwd(g, v, s):
        return g * s.reshape(bshape), (g * v).sum(axis=red), g.sum(axis=red)

    return _record(
        "scale_shift", (x, scale, shift), fwd(x.value, scale.value, shift.value), fwd, bwd,
        (x.value, scale.value),
    )


# --------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand(g, shape, axes, keepdims):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce_sum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape

    def fwd(v):
        return v.sum(axis=axes, keepdims=keepdims)

    return _record("sum", (x,), fwd(x.value), fwd, lambda g: (_expand(g, shape, axes, keepdims).copy(),))


def reduce_mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    n = int(np.prod([shape[a] for a in axes])) if axes else 1

    def fwd(v):
        return v.mean(axis=axes, keepdims=keepdims)

    return _record("mean", (x,), fwd(x.value), fwd, lambda g: (_expand(g, shape, axes, keepdims) / n,))


def reduce_var(x, axis=None, keepdims=False) -> Tensor:
    """Population variance (ddof 0) over ``axis``."""
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    n = int(np.prod([shape[a] for a in axes])) if axes else 1

    def fwd(v):
        return v.var(axis=axes, keepdims=keepdims)

    def bwd(g, v):
        centered = v - v.mean(axis=axes, keepdims=True)
        return (_expand(g, shape, axes, keepdims) * (2.0 / n) * centered,)

    return _record("var", (x,), fwd(x.value), fwd, bwd, (x.value,))


# ------------------------------------------------------------------- shape


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape

    def fwd(v):
        return v.reshape(shape)

    return _record("reshape", (x,), fwd(x.value), fwd, lambda g: (g.reshape(old),))


def getitem(x, idx) -> Tensor:
    """Slicing / integer indexing; gradients scatter back with accumulation."""
    x = as_tensor(x)
    shape = x.shape

    def fwd(v):
        return np.array(v[idx])

    def bwd(g):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record("slice", (x,), fwd(x.value), fwd, bwd)


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def fwd(*vs):
        return np.concatenate(vs, axis=axis)

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", tuple(xs), fwd(*[x.value for x in xs]), fwd, bwd)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    n = len(xs)

    def fwd(*vs):
        return np.stack(vs, axis=axis)

    def bwd(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _record("stack", tuple(xs), fwd(*[x.value for x in xs]), fwd, bwd)


def roll(x, shift: int, axis: int) -> Tensor:
    """Periodic translation by ``shift`` cells along ``axis``."""
    x = as_tensor(x)

    def fwd(v):
        return np.roll(v, shift, axis=axis)

    return _record("roll", (x,), fwd(x.value), fwd, lambda g: (np.roll(g, -shift, axis=axis),))


# ------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DiffError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    sa, sb = a.shape, b.shape
    need_a, need_b = a.tracked, b.tracked

    def bwd(g, av, bv):
        ga = unbroadcast(g @ np.swapaxes(bv, -1, -2), sa) if need_a else None
        gb = unbroadcast(np.swapaxes(av, -1, -2) @ g, sb) if need_b else None
        return ga, gb

    return _record("matmul", (a, b), a.value @ b.value, np.matmul, bwd, (a.value, b.value))


def channel_mix(x, m) -> Tensor:
    """``out[b, s, ...] = sum_r m[r, s] * x[b, r, ...]``."""
    x, m = as_tensor(x), as_tensor(m)
    if x.shape[1] != m.shape[0]:
        raise DiffError(f"channel_mix: {x.shape} vs {m.shape}")
    need_x, need_m = x.tracked, m.tracked

    def fwd(xv, mv):
        return np.moveaxis(np.tensordot(xv, mv, axes=([1], [0])), -1, 1)

    def bwd(g, xv, mv):
        gx = np.moveaxis(np.tensordot(g, mv, axes=([1], [1])), -1, 1) if need_x else None
        if need_m:
            xf = xv.reshape(xv.shape[0], xv.shape[1], -1)
            gf = g.reshape(g.shape[0], g.shape[1], -1)
            gm = np.tensordot(xf, gf, axes=([0, 2], [0, 2]))
        else:
            gm = None
        return gx, gm

    return _record("channel_mix", (x, m), fwd(x.value, m.value), fwd, bwd, (x.value, m.value))


# ------------------------------------------------------------- convolutions


def conv2d_periodic(x, kernel: np.ndarray) -> Tensor:
    """Depthwise toroidal cross-correlation over the last two axes with a fixed kernel."""
    x = as_tensor(x)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise DiffError("conv2d_periodic needs an odd-sized 2D kernel")
    if x.ndim < 2:
        raise DiffError("conv2d_periodic needs at least 2D input")
    flipped = kernel[::-1, ::-1].copy()

    def fwd(v):
        return kernels.conv2d_periodic(v, kernel)

    def bwd(g):
        return (kernels.conv2d_periodic(g, flipped),)

    return _record("conv2d_periodic", (x,), fwd(x.value), fwd, bwd)


def _s2_index(n_in: int, k: int):
    # rows hit by tap p of input row i: (2 i + p - off) mod 2 n_in
    off = k // 2 - 1
    return (2 * np.arange(n_in)[None, :] + np.arange(k)[:, None] - off) % (2 * n_in)


def _gather_s2(big, ri, ci):
    # big: [B, C, 2H, 2W] -> [B, C, k, k, H, W]
    return big[:, :, ri[:, None, :, None], ci[None, :, None, :]]


def _scatter_s2(taps, ri, ci, out_shape):
    out = np.zeros(out_shape)
    k = taps.shape[2]
    for p in range(k):
        rows = ri[p][:, None]
        for q in range(k):
            out[:, :, rows, ci[q][None, :]] += taps[:, :, p, q]
    return out


# contractions go through tensordot (BLAS); plain einsum is ~20x slower on these shapes


def conv_transpose2d(x, w) -> Tensor:
    """Stride-2 transposed convolution with toroidal wrap.

    ``x``: [B, Cin, H, W]; ``w``: [Cin, Cout, k, k] with even ``k``; output
    [B, Cout, 2H, 2W].
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0] or w.shape[2] != w.shape[3]:
        raise DiffError(f"conv_transpose2d: shapes {x.shape} and {w.shape} do not conform")
    k = w.shape[2]
    if k % 2:
        raise DiffError("conv_transpose2d needs an even kernel size")
    b, _, h, wd = x.shape
    ri, ci = _s2_index(h, k), _s2_index(wd, k)
    out_shape = (b, w.shape[1], 2 * h, 2 * wd)
    need_x, need_w = x.tracked, w.tracked

    def fwd(xv, wv):
        taps = np.tensordot(xv, wv, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
        return _scatter_s2(taps, ri, ci, out_shape)

    def bwd(g, xv, wv):
        gg = _gather_s2(g, ri, ci)
        gx = np.tensordot(gg, wv, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2) if need_x else None
        gw = np.tensordot(xv, gg, axes=([0, 2, 3], [0, 4, 5])) if need_w else None
        return gx, gw

    return _record("conv_transpose2d", (x, w), fwd(x.value, w.value), fwd, bwd, (x.value, w.value))


def conv2d_stride2(x, w) -> Tensor:
    """Stride-2 convolution with toroidal wrap; the adjoint of :func:`conv_transpose2d`.

    ``x``: [B, Cin, 2H, 2W]; ``w``: [Cin, Cout, k, k]; output [B, Cout, H, W].
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise DiffError(f"conv2d_stride2: shapes {x.shape} and {w.shape} do not conform")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise DiffError(f"conv2d_stride2: spatial extent {x.shape[2:]} is not even")
    k = w.shape[2]
    h, wd = x.shape[2] // 2, x.shape[3] // 2
    ri, ci = _s2_index(h, k), _s2_index(wd, k)
    in_shape = x.shape
    need_x, need_w = x.tracked, w.tracked

    def fwd(xv, wv):
        return np.tensordot(_gather_s2(xv, ri, ci), wv, axes=([1, 2, 3], [0, 2, 3])).transpose(0, 3, 1, 2)

    def bwd(g, xv, wv):
        gx = None
        if need_x:
            taps = np.tensordot(g, wv, axes=([1], [1])).transpose(0, 3, 4, 5, 1, 2)
            gx = _scatter_s2(taps, ri, ci, in_shape)
        gw = np.tensordot(_gather_s2(xv, ri, ci), g, axes=([0, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2) if need_w else None
        return gx, gw

    return _record("conv2d_stride2", (x, w), fwd(x.value, w.value), fwd, bwd, (x.value, w.value))


def batch_norm(x, axes=(0, 2, 3), eps: float = 1e-5) -> Tensor:
    """Normalise with current-batch statistics over ``axes`` (no affine part)."""
    x = as_tensor(x)
    axes = _norm_axis(axes, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))

    def fwd(v):
        mu = v.mean(axis=axes, keepdims=True)
        var = v.var(axis=axes, keepdims=True)
        return (v - mu) / np.sqrt(var + eps)

    def bwd(g, v):
        mu = v.mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(v.var(axis=axes, keepdims=True) + eps)
        xhat = (v - mu) * inv
        gs = g.sum(axis=axes, keepdims=True)
        gxs = (g * xhat).sum(axis=axes, keepdims=True)
        return (inv / n * (n * g - gs - xhat * gxs),)

    return _record("batch_norm", (x,), fwd(x.value), fwd, bwd, (x.value,))


# --------------------------------------------------------- fused primitives


def mass_action(x, k, table: np.ndarray) -> Tensor:
    """Mass-action rates ``k_j * prod_m x[:, table[j, m]]``.

    ``x``: [B, S, ...]; ``k``: [R]; ``table``: int [R, 3] of reactant species
    indices, padded with ``S`` for absent factors. Returns [B, R, ...].
    """
    x, k = as_tensor(x), as_tensor(k)
    table = np.ascontiguousarray(table, dtype=np.int64)
    if k.shape != (table.shape[0],):
        raise DiffError(f"mass_action: {k.shape} rate constants for {table.shape[0]} reactions")

    def fwd(xv, kv):
        return kernels.mass_action(xv, kv, table)

    def bwd(g, xv, kv):
        return kernels.mass_action_backward(xv, kv, table, g)

    return _record("mass_action", (x, k), fwd(x.value, k.value), fwd, bwd, (x.value, k.value))


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy of ``targets`` (constant) given logits."""
    logits = as_tensor(logits)
    t = np.asarray(targets.value if isinstance(targets, Tensor) else targets, dtype=np.float64)

    def fwd(lv):
        return np.maximum(lv, 0) - lv * t + np.log1p(np.exp(-np.abs(lv)))

    return _record(
        "bce_with_logits", (logits,), fwd(logits.value), fwd,
        lambda g, lv: (g * (_sigmoid(lv) - t),), (logits.value,),
    )


def checkpoint(fn: Callable[..., Tensor], *inputs) -> Tensor:
    """Evaluate ``fn(*inputs)`` without retaining its intermediates.

    One node is recorded; its backward re-runs ``fn`` on a private tape and
    differentiates through it. Trades a second forward pass for memory.
    """
    inputs = [as_tensor(t) for t in inputs]
    tracked = [t.tracked for t in inputs]

    def fwd(*vals):
        return fn(*[Tensor(v) for v in vals]).value

    def bwd(g, *vals):
        sub = Tape()
        args = [sub.leaf(v) if tr else Tensor(v) for v, tr in zip(vals, tracked)]
        out = fn(*args)
        if out.tape is None:
            return tuple(None for _ in args)
        grads = sub.backprop(out.node, g)
        res = []
        for a in args:
            if a.tape is None:
                res.append(None)
            else:
                ga = grads[a.node]
                res.append(np.zeros_like(a.value) if ga is None else ga)
        return tuple(res)

    value = fwd(*[t.value for t in inputs])
    return _record("checkpoint", tuple(inputs), value, fwd, bwd, tuple(t.value for t in inputs))


# ------------------------------------------------------------------ registry

OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "pow_int": pow_int,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "sqrt": sqrt,
    "abs": abs_,
    "clamp": clamp,
    "maximum": maximum,
    "matmul": matmul,
    "channel_mix": channel_mix,
    "conv2d_periodic": conv2d_periodic,
    "conv_transpose2d": conv_transpose2d,
    "conv2d_stride2": conv2d_stride2,
    "batch_norm": batch_norm,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "var": reduce_var,
    "roll": roll,
    "slice": getitem,
    "concat": concat,
    "stack": stack,
    "reshape": reshape,
    "scale_shift": scale_shift,
    "mass_action": mass_action,
    "bce_with_logits": bce_with_logits,
    "checkpoint": checkpoint,
}


def op_forward(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Apply a registered op by name."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise DiffError(f"unknown op kind {kind!r}") from None
    if kind in ("concat", "stack"):
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)
