"""Reverse-mode automatic differentiation over small dense numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in execution
order, so the tape is already topologically sorted and ``Tape.backward`` is a
single reverse sweep. Outside a tape every op is a plain numpy computation,
which is what rollouts use.

Broadcasting is limited to adding (or multiplying by) a trailing-shaped operand
such as a bias row; anything else must be reshaped explicitly.
"""
from __future__ import annotations

import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

NEG_FILL = -1e9

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "ccoma_active_tape", default=None
)


class ShapeError(ValueError):
    pass


class Tensor:
    """Dense real array with an optional gradient slot and a tape node id."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: int | None = None
        self.name = name

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(dims={self.dims}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive ops; one per rollout/update context.

    Usage::

        with Tape() as tape:
            loss = ...
        tape.backward(loss)
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        out.node = len(self.records)
        out.requires_grad = True
        self.records.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every leaf that requires grad.

        Leaf gradients are overwritten, not accumulated across calls.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got dims {loss.dims}")
        if loss.node is None or loss.node >= len(self.records) or self.records[loss.node][0] is not loss:
            raise ValueError("loss was not produced on this tape")

        for _, inputs, _ in self.records:
            for x in inputs:
                if x.requires_grad and x.node is None:
                    x.grad = None

        node_grads: list[np.ndarray | None] = [None] * len(self.records)
        node_grads[loss.node] = np.ones_like(loss.data)
        for idx in range(loss.node, -1, -1):
            g = node_grads[idx]
            if g is None:
                continue
            node_grads[idx] = None
            out, inputs, backward_fn = self.records[idx]
            in_grads = backward_fn(g)
            for x, gx in zip(inputs, in_grads):
                if gx is None or not x.requires_grad:
                    continue
                if x.node is not None and x.node < len(self.records) and self.records[x.node][0] is x:
                    prev = node_grads[x.node]
                    node_grads[x.node] = gx if prev is None else prev + gx
                else:
                    x.grad = gx.copy() if x.grad is None else x.grad + gx


def grad(loss: Tensor, params: Sequence[Tensor], tape: Tape) -> list[np.ndarray]:
    """Convenience wrapper: run backward and return grads aligned with ``params``."""
    tape.backward(loss)
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(data)
    tape = _active_tape.get()
    if tape is not None and any(x.requires_grad for x in inputs):
        tape.record(out, inputs, backward)
    return out


def _bias_compatible(op: str, a: Tensor, b: Tensor) -> bool:
    """True when b is broadcast over a's leading axes (bias style)."""
    if a.shape == b.shape:
        return False
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return True
    raise ShapeError(f"{op}: shape mismatch {a.dims} vs {b.dims}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    bias = _bias_compatible("add", a, b)
    sb = b.shape

    def backward(g):
        return g, (_reduce_to(g, sb) if bias else g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    bias = _bias_compatible("sub", a, b)
    sb = b.shape

    def backward(g):
        return g, -(_reduce_to(g, sb) if bias else g)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    bias = _bias_compatible("mul", a, b)
    ad, bd, sb = a.data, b.data, b.shape

    def backward(g):
        gb = g * ad
        return g * bd, (_reduce_to(gb, sb) if bias else gb)

    return _make(ad * bd, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """(..., m, k) @ (k, n) or batched (..., m, k) @ (..., k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.dims} and {b.dims}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.dims} vs {b.dims}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        def backward(g):
            k, n = bd.shape
            ga = g @ bd.T
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb
    elif a.shape[:-2] == b.shape[:-2]:
        def backward(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g
    else:
        raise ShapeError(f"matmul: batch dims differ {a.dims} vs {b.dims}")
    return _make(ad @ bd, (a, b), backward)


# ---------------------------------------------------------------- structure


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or t.shape[:ax] + t.shape[ax + 1:] != ref.shape[:ax] + ref.shape[ax + 1:]:
            raise ShapeError(f"concat: shape mismatch {ref.dims} vs {t.dims} on axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def gather_rows(a, indices) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise IndexError(f"gather_rows: index out of range for dims {a.dims}")
    shape = a.shape

    def backward(g):
        ga = np.zeros(shape, dtype=g.dtype)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(a.data[idx], (a,), backward)


def reshape(a, shape: Iterable[int]) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    return _make(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(orig),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- elementwise


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def _softmax_backward(y: np.ndarray):
    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)
    return backward


def row_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _make(y, (a,), _softmax_backward(y))


def masked_row_softmax(logits, mask, neg_fill: float = NEG_FILL) -> Tensor:
    """Softmax over the last axis with masked-out entries forced to zero.

    ``mask`` is a binary array of the same dims as ``logits``; zeros receive
    the additive fill before normalisation and therefore exactly zero
    probability and zero gradient.
    """
    logits = as_tensor(logits)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if m.shape != logits.shape:
        raise ShapeError(f"masked_row_softmax: shape mismatch {logits.dims} vs {list(m.shape)}")
    keep = m != 0
    if not keep.any(axis=-1).all():
        raise ValueError("masked_row_softmax: a row has no unmasked entry (no valid attendee)")
    z = np.where(keep, logits.data, logits.data + neg_fill)
    # shift by the max over kept entries only, so masked logits never move the result
    z = z - np.where(keep, z, -np.inf).max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(z), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)
    return _make(y, (logits,), _softmax_backward(y))
