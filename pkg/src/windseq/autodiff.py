"""Dense float64 tensors with a define-by-run reverse-mode tape.

Every operation lives on a :class:`Tape`; the tape records the backward rule
of each op whose output depends on a trainable leaf. A tape is used for one
forward pass and one backward pass, and is not shared between threads.

    >>> tp = Tape()
    >>> x = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> loss = tp.sum(tp.mul(x, x))
    >>> tp.backward(loss, [x])[0]
    array([[2., 4.]])
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import _kernels


class NonFiniteError(FloatingPointError):
    """A tensor would have held NaN or Inf."""


class ShapeError(ValueError):
    pass


class Tensor:
    """Immutable float64 array, optionally a trainable leaf."""

    __slots__ = ("values", "requires_grad", "name", "_tape")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64, copy=True)
        if not np.isfinite(arr).all():
            label = f" {name!r}" if name else ""
            raise NonFiniteError(f"tensor{label} of shape {arr.shape} contains NaN/Inf")
        arr.flags.writeable = False
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool, tape) -> "Tensor":
        # Fast path for op outputs: the array is freshly allocated and owned.
        arr = np.asarray(arr, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"op produced NaN/Inf (shape {arr.shape})")
        arr.flags.writeable = False
        t = cls.__new__(cls)
        t.values = arr
        t.requires_grad = requires_grad
        t.name = None
        t._tape = tape
        return t

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.values.ndim == 0 or b.values.ndim == 0:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


class Tape:
    """Ordered op record supporting a single backward sweep.

    ``record=False`` builds a forward-only tape (inference): nothing is stored
    and :meth:`backward` is unavailable.
    """

    def __init__(self, record: bool = True):
        self.record_grads = record
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Backward]] = []
        self._used = False

    def __len__(self) -> int:
        return len(self._nodes)

    # -- recording -------------------------------------------------------
    def record(self, values: np.ndarray, inputs: Sequence[Tensor], backward: Backward) -> Tensor:
        """Wrap ``values`` as the output of a custom op with rule ``backward``.

        ``backward(grad_out)`` must return one gradient (or ``None``) per input.
        """
        if self._used:
            raise RuntimeError("tape already consumed by backward(); start a new tape")
        needs = self.record_grads and any(t.requires_grad for t in inputs)
        out = Tensor._wrap(values, needs, self)
        if needs:
            self._nodes.append((out, tuple(inputs), backward))
        return out

    # -- primitives ------------------------------------------------------
    def matmul(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        av, bv = a.values, b.values
        return self.record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))

    def add(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        _check_elementwise(a, b, "add")
        sa, sb = a.shape, b.shape
        return self.record(np.add(a.values, b.values), (a, b),
                           lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))

    def sub(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        _check_elementwise(a, b, "sub")
        sa, sb = a.shape, b.shape
        return self.record(np.subtract(a.values, b.values), (a, b),
                           lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))

    def mul(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        _check_elementwise(a, b, "mul")
        av, bv = a.values, b.values
        return self.record(np.multiply(av, bv), (a, b),
                           lambda g: (_reduce_to(g * bv, av.shape), _reduce_to(g * av, bv.shape)))

    def add_row(self, a, bias) -> Tensor:
        """``a[i, :] + bias`` for a 2-D ``a`` and a 1-D ``bias``."""
        a, bias = _as_tensor(a), _as_tensor(bias)
        if a.values.ndim != 2 or bias.shape != (a.shape[1],):
            raise ShapeError(f"add_row: cannot add bias {bias.shape} to rows of {a.shape}")
        return self.record(a.values + bias.values, (a, bias), lambda g: (g, g.sum(axis=0)))

    def scale(self, a, c: float) -> Tensor:
        a = _as_tensor(a)
        c = float(c)
        return self.record(a.values * c, (a,), lambda g: (g * c,))

    def sigmoid(self, a) -> Tensor:
        a = _as_tensor(a)
        s = _kernels.sigmoid(a.values)
        return self.record(s, (a,), lambda g: (g * s * (1.0 - s),))

    def tanh(self, a) -> Tensor:
        a = _as_tensor(a)
        t = np.tanh(a.values)
        return self.record(t, (a,), lambda g: (g * (1.0 - t * t),))

    def one_minus(self, a) -> Tensor:
        a = _as_tensor(a)
        return self.record(1.0 - a.values, (a,), lambda g: (-g,))

    def concat(self, parts: Sequence, axis: int = 1) -> Tensor:
        parts = [_as_tensor(p) for p in parts]
        try:
            out = np.concatenate([p.values for p in parts], axis=axis)
        except ValueError as exc:
            raise ShapeError(f"concat: {[p.shape for p in parts]} along axis {axis}: {exc}") from None
        bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

        def back(g):
            return np.split(g, bounds, axis=axis)

        return self.record(out, parts, back)

    def slice_cols(self, a, start: int, stop: int) -> Tensor:
        a = _as_tensor(a)
        if a.values.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
            raise ShapeError(f"slice_cols: [{start}:{stop}] out of range for {a.shape}")
        shape = a.shape

        def back(g):
            full = np.zeros(shape)
            full[:, start:stop] = g
            return (full,)

        return self.record(a.values[:, start:stop].copy(), (a,), back)

    def take_columns(self, table, index) -> Tensor:
        """Rows ``table[:, index[b]]`` stacked into a ``(len(index), d)`` matrix."""
        table = _as_tensor(table)
        idx = np.asarray(index, dtype=np.int64)
        if table.values.ndim != 2 or idx.ndim != 1:
            raise ShapeError(f"take_columns: table {table.shape}, index {idx.shape}")
        if idx.size and (idx.min() < 0 or idx.max() >= table.shape[1]):
            raise IndexError(f"take_columns: index out of range for {table.shape[1]} columns")
        shape = table.shape

        def back(g):
            full = np.zeros(shape)
            np.add.at(full.T, idx, g)
            return (full,)

        return self.record(table.values[:, idx].T.copy(), (table,), back)

    def sum(self, a) -> Tensor:
        a = _as_tensor(a)
        shape = a.shape
        return self.record(np.asarray(a.values.sum()), (a,),
                           lambda g: (np.full(shape, float(g)),))

    def mean(self, a) -> Tensor:
        a = _as_tensor(a)
        shape, n = a.shape, a.size
        return self.record(np.asarray(a.values.mean()), (a,),
                           lambda g: (np.full(shape, float(g) / n),))

    # -- reverse sweep ---------------------------------------------------
    def backward(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` w.r.t. each tensor in ``wrt``.

        Leaves with no path to ``loss`` get exact zeros.
        """
        if not self.record_grads:
            raise RuntimeError("backward() on a forward-only tape")
        if self._used:
            raise RuntimeError("backward() already called on this tape")
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("backward: loss was not produced on this tape")
        self._used = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        for out, inputs, back in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, back(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        self._nodes.clear()
        return [grads.get(id(t), np.zeros(t.shape)) for t in wrt]
