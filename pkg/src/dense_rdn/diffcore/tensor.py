"""Tensors and the recording tape for reverse-mode differentiation.

A :class:`Tape` is created per optimization run (or per iteration) and owns
every node recorded on it. Tensors created with :meth:`Tape.leaf` are tracked;
plain ``Tensor(array)`` values are constants. An op whose inputs touch a tape
records one node on that tape; mixing tensors from two tapes is an error.
There is no global registry of tapes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np


class DiffError(ValueError):
    """Raised for shape errors, non-finite values and misuse of the tape."""


class NonFiniteError(DiffError):
    pass


class UntrackedError(DiffError, KeyError):
    pass


@dataclass
class Record:
    kind: str
    # each input is ("node", id) or ("const", ndarray)
    inputs: tuple
    forward: Callable[..., np.ndarray] | None
    backward: Callable[..., tuple] | None
    saved: tuple = ()


class Tape:
    def __init__(self) -> None:
        self.records: list[Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def leaf(self, value: Any) -> "Tensor":
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("leaf value is not finite")
        self.records.append(Record("leaf", (), None, None, (arr,)))
        return Tensor(arr, self, len(self.records) - 1)

    def append(self, record: Record) -> int:
        self.records.append(record)
        return len(self.records) - 1

    def saved_nbytes(self) -> int:
        """Bytes held by saved intermediates (leaf values excluded)."""
        seen: dict[int, int] = {}
        for rec in self.records:
            if rec.kind == "leaf":
                continue
            for s in rec.saved:
                if isinstance(s, np.ndarray):
                    seen[id(s)] = s.nbytes
        return sum(seen.values())

    def replay(self, leaf_values: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Re-run every recorded forward from the leaves; returns values by node id."""
        values: list[np.ndarray] = []
        for i, rec in enumerate(self.records):
            if rec.kind == "leaf":
                v = rec.saved[0]
                if leaf_values is not None and i in leaf_values:
                    v = np.asarray(leaf_values[i], dtype=np.float64)
                values.append(v)
                continue
            args = [values[ref] if tag == "node" else ref for tag, ref in rec.inputs]
            values.append(rec.forward(*args))
        return values

    def backprop(self, root: int, seed: np.ndarray) -> list[np.ndarray | None]:
        """Propagate ``seed`` (d root) back through the tape; returns grads per node."""
        recs = self.records
        grads: list[np.ndarray | None] = [None] * len(recs)
        grads[root] = seed
        for i in range(root, -1, -1):
            g = grads[i]
            rec = recs[i]
            if g is None or rec.kind == "leaf":
                continue
            in_grads = rec.backward(g, *rec.saved)
            for (tag, ref), ig in zip(rec.inputs, in_grads):
                if tag != "node" or ig is None:
                    continue
                prev = grads[ref]
                grads[ref] = ig if prev is None else prev + ig
            grads[i] = None
        return grads


class GradMap(dict):
    """Leaf gradients keyed by node id; also indexable by the leaf tensor."""

    def __init__(self, tape: Tape, data: dict[int, np.ndarray]):
        super().__init__(data)
        self.tape = tape

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            if key.tape is None:
                raise UntrackedError("gradient requested for an untracked constant")
            if key.tape is not self.tape:
                raise UntrackedError("tensor belongs to a different tape")
            key = key.node
        try:
            return super().__getitem__(key)
        except KeyError:
            raise UntrackedError(f"node {key} is not a leaf of this tape") from None


def backward(root: "Tensor") -> GradMap:
    """Gradient of a scalar ``root`` with respect to every leaf on its tape."""
    if root.tape is None:
        raise DiffError("root is not tracked on any tape")
    if root.value.size != 1:
        raise DiffError(f"backward needs a scalar root, got shape {root.shape}")
    tape = root.tape
    grads = tape.backprop(root.node, np.ones_like(root.value))
    out = {}
    for i, rec in enumerate(tape.records):
        if rec.kind == "leaf":
            g = grads[i]
            out[i] = np.zeros_like(rec.saved[0]) if g is None else np.asarray(g)
    return GradMap(tape, out)


class Tensor:
    """An n-dimensional float64 array, optionally tracked on a :class:`Tape`."""

    __slots__ = ("value", "tape", "node")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, value: Any, tape: Tape | None = None, node: int | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; implementations live in ops
    def __add__(self, o):
        return _ops().add(self, o)

    def __radd__(self, o):
        return _ops().add(o, self)

    def __sub__(self, o):
        return _ops().sub(self, o)

    def __rsub__(self, o):
        return _ops().sub(o, self)

    def __mul__(self, o):
        return _ops().mul(self, o)

    def __rmul__(self, o):
        return _ops().mul(o, self)

    def __truediv__(self, o):
        return _ops().div(self, o)

    def __rtruediv__(self, o):
        return _ops().div(o, self)

    def __neg__(self):
        return _ops().neg(self)

    def __pow__(self, n):
        return _ops().pow_int(self, n)

    def __matmul__(self, o):
        return _ops().matmul(self, o)

    def __getitem__(self, idx):
        return _ops().getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return _ops().reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().reduce_mean(self, axis, keepdims)

    def var(self, axis=None, keepdims=False):
        return _ops().reduce_var(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)


def _ops():
    from dense_rdn.diffcore import ops

    return ops


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def common_tape(inputs: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise DiffError("inputs are tracked on different tapes")
    return tape
