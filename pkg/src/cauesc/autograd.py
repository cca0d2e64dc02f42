"""Dense float64 arrays with reverse-mode differentiation.

Every model computation in the package is expressed with :class:`Value`
objects and the kernels in this module.  Storage is numpy (row-major,
float64); the graph bookkeeping and every backward rule live here.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A kernel received or produced non-finite numbers."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Value:
    """A dense array that may take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Value, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate gradients from this node to every reachable input.

        Leaf gradients accumulate across calls; each node is visited once
        per call.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_value(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Parameter(Value):
    """A learnable Value identified by a dotted name."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _topological_order(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _make(data: np.ndarray, parents: tuple[Value, ...], backward) -> Value:
    out = Value(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def exp(x: Value) -> Value:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Value) -> Value:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Value) -> Value:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Value) -> Value:
    """tanh-approximated GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out, (x,), backward)


def dropout(x: Value, rate: float, rng: np.random.Generator | None, training: bool = True) -> Value:
    if not training or rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def masked_fill(x: Value, mask: np.ndarray, value: float) -> Value:
    """Replace entries where ``mask`` is true with a constant."""
    mask = np.broadcast_to(mask, x.shape)
    return _make(np.where(mask, value, x.data), (x,), lambda g: (np.where(mask, 0.0, g),))


# reductions and shape ------------------------------------------------------


def sum_(x: Value, axis=None, keepdims: bool = False) -> Value:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward)


def mean(x: Value, axis=None, keepdims: bool = False) -> Value:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(n))


def canonical_sum(x: Value, axis: int = 0) -> Value:
    """Sum along ``axis`` in value-sorted order.

    The result is bit-identical under any permutation of the summed
    terms, which keeps strategy relabeling exact.
    """
    out = np.add.reduce(np.sort(x.data, axis=axis), axis=axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(out, (x,), backward)


def reshape(x: Value, shape: Sequence[int]) -> Value:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Value, axes: Sequence[int]) -> Value:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def swap_last(x: Value) -> Value:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def broadcast_to(x: Value, shape: Sequence[int]) -> Value:
    shape = tuple(shape)
    return _make(np.ascontiguousarray(np.broadcast_to(x.data, shape)), (x,),
                 lambda g: (_unbroadcast(g, x.shape),))


def concat(xs: Sequence[Value], axis: int = 0) -> Value:
    xs = [as_value(x) for x in xs]
    if len(xs) == 1:
        return xs[0]
    axis = axis % xs[0].ndim
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.ascontiguousarray(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis))
                     for i in range(len(xs)))

    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), backward)


def stack(xs: Sequence[Value], axis: int = 0) -> Value:
    xs = [as_value(x) for x in xs]

    def backward(g):
        return tuple(np.ascontiguousarray(np.take(g, i, axis=axis)) for i in range(len(xs)))

    return _make(np.stack([x.data for x in xs], axis=axis), tuple(xs), backward)


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer)) for p in parts)


def getitem(x: Value, idx) -> Value:
    basic = _is_basic(idx)

    def backward(g):
        out = np.zeros_like(x.data)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(np.ascontiguousarray(x.data[idx]), (x,), backward)


def embedding(table: Value, ids: np.ndarray) -> Value:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _make(table.data[ids], (table,), backward)


# linear algebra ------------------------------------------------------------


def matmul(a: Value, b: Value) -> Value:
    """Matrix product over the last two axes, batched over leading axes."""
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def backward(g):
            g2 = g.reshape(-1, n)
            return ((g2 @ b.data.T).reshape(a.shape), a2.T @ g2)

        return _make(out, (a, b), backward)

    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(out, (a, b), backward)


def linear(x: Value, weight: Value, bias: Value | None = None) -> Value:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# normalized kernels --------------------------------------------------------


def _softmax_data(x: np.ndarray, axis: int, order_free: bool) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    if order_free:
        total = np.add.reduce(np.sort(e, axis=axis), axis=axis, keepdims=True)
    else:
        total = e.sum(axis=axis, keepdims=True)
    return e / total


def _softmax_backward(y: np.ndarray, g: np.ndarray, axis: int) -> np.ndarray:
    return y * (g - (g * y).sum(axis=axis, keepdims=True))


def softmax(x: Value, axis: int = -1, order_free: bool = False) -> Value:
    """Max-shifted softmax.

    ``order_free`` sums the exponentials in sorted order so the result is
    invariant, bit for bit, to permutations along ``axis``.
    """
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax received non-finite input")
    y = _softmax_data(x.data, axis, order_free)
    return _make(y, (x,), lambda g: (_softmax_backward(y, g, axis),))


def masked_softmax(x: Value, mask: np.ndarray, axis: int = -1) -> Value:
    """Softmax restricted to entries where ``mask`` is true.

    Excluded entries get exactly zero weight; a slice with no admissible
    entry is all zeros.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    filled = np.where(mask, x.data, -np.inf)
    top = filled.max(axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(np.where(mask, x.data, top) - top), 0.0)
    total = e.sum(axis=axis, keepdims=True)
    y = np.divide(e, total, out=np.zeros_like(e), where=total > 0)
    return _make(y, (x,), lambda g: (_softmax_backward(y, g, axis),))


def log_softmax(x: Value, axis: int = -1) -> Value:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    y = np.exp(out)
    return _make(out, (x,), lambda g: (g - y * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Value, gain: Value, bias: Value, eps: float = 1e-5) -> Value:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match last axis {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), backward)


def cross_entropy(logits: Value, targets, ignore_index: int = -100,
                  reduction: str = "mean", order_free: bool = False) -> Value:
    """Negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``logits`` has shape (..., V); ``targets`` the leading shape.  Positions
    equal to ``ignore_index`` contribute nothing.  ``reduction`` is
    ``"mean"`` (over counted positions) or ``"sum"``.  ``order_free``
    normalizes with a sorted sum so permuting classes is bit-exact.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise ShapeError(f"targets shape {np.shape(targets)} does not match logits {logits.shape}")
    keep = t != ignore_index
    bad = keep & ((t < 0) | (t >= V))
    if bad.any():
        raise IndexError(f"target id {int(t[bad][0])} outside [0, {V})")
    shifted = flat - flat.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    lse = np.log(np.add.reduce(np.sort(e, axis=-1), axis=-1, keepdims=True) if order_free
                 else e.sum(axis=-1, keepdims=True))
    logp = shifted - lse
    rows = np.nonzero(keep)[0]
    nll = -logp[rows, t[rows]]
    count = len(rows)
    total = nll.sum()
    scale = 1.0 / count if (reduction == "mean" and count) else 1.0
    out = np.asarray(total * scale if count else 0.0)

    def backward(g):
        grad = np.zeros_like(flat)
        if count:
            p = np.exp(logp[rows])
            p[np.arange(count), t[rows]] -= 1.0
            grad[rows] = p * (float(g) * scale)
        return (grad.reshape(logits.shape),)

    return _make(out, (logits,), backward)


def fuse(mu: Value, s: Value, c: Value) -> Value:
    """Elementwise ``mu * s + (1 - mu) * c``.

    Exact at the extremes: ``mu == 0`` gives ``c``, ``mu == 1`` gives ``s``
    and ``s == c`` gives ``s`` regardless of ``mu``.
    """
    if s.shape != c.shape:
        raise ShapeError(f"fuse operands differ: {s.shape} vs {c.shape}")
    m = np.broadcast_to(mu.data, s.shape)
    blend = m * s.data + (1.0 - m) * c.data
    out = np.where(s.data == c.data, s.data, blend)

    def backward(g):
        return (_unbroadcast(g * (s.data - c.data), mu.shape), g * m, g * (1.0 - m))

    return _make(out, (mu, s, c), backward)


def parameters_of(values: Iterable[Value]) -> list[Value]:
    return [v for v in values if v.requires_grad]
