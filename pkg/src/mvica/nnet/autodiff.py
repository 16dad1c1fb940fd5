"""Reverse-mode differentiation over float64 numpy arrays.

A :class:`Tensor` records the op that produced it and its parents.  Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order and accumulates gradients into every reachable node.
Parameter leaves may be given a preallocated ``grad`` buffer (typically a view
into a flat gradient vector); accumulation into it is in place.

Broadcasting is limited to what the networks here need: equal shapes,
scalars, and a row vector added to a matrix.
"""
from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "parents", "op", "requires_grad", "_backward")

    def __init__(self, value, parents=(), op="leaf", backward=None, grad=None, requires_grad=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = grad
        self.parents = parents
        self.op = op
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents) if parents else op != "const"
        self.requires_grad = requires_grad
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.value.shape)
        else:
            self.grad += g

    def backward(self, upstream=None):
        """Accumulate d(self)/d(node) into every node reachable from ``self``."""
        if upstream is None:
            if self.value.size != 1:
                raise ValueError("backward() without an upstream gradient needs a scalar output")
            upstream = np.ones_like(self.value)
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != self.value.shape:
            raise ValueError(f"upstream gradient shape {upstream.shape} != output shape {self.value.shape}")
        order = _topological(self)
        self._accumulate(upstream)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None and node.requires_grad:
                node._backward(node.grad)


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, op="const")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0 or int(np.prod(shape)) == 1:
        return np.sum(g).reshape(shape)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b):
    sa, sb = a.shape, b.shape
    if sa == sb or a.value.size == 1 or b.value.size == 1:
        return
    # row vector against matrix
    if len(sa) == 2 and sb in ((sa[1],), (1, sa[1])):
        return
    if len(sb) == 2 and sa in ((sb[1],), (1, sb[1])):
        return
    raise ValueError(f"unsupported broadcast between {sa} and {sb}")


# ---------------------------------------------------------------------------
# binary ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = Tensor(a.value + b.value, (a, b), "add")

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    out._backward = backward
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = Tensor(a.value - b.value, (a, b), "sub")

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    out._backward = backward
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = Tensor(a.value * b.value, (a, b), "mul")

    def backward(g):
        a._accumulate(_unbroadcast(g * b.value, a.shape))
        b._accumulate(_unbroadcast(g * a.value, b.shape))

    out._backward = backward
    return out


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = Tensor(a.value / b.value, (a, b), "div")

    def backward(g):
        a._accumulate(_unbroadcast(g / b.value, a.shape))
        b._accumulate(_unbroadcast(-g * a.value / (b.value * b.value), b.shape))

    out._backward = backward
    return out


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = Tensor(a.value @ b.value, (a, b), "matmul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.T @ g)

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# unary ops


def neg(a):
    a = as_tensor(a)
    out = Tensor(-a.value, (a,), "neg")
    out._backward = lambda g: a._accumulate(-g)
    return out


def square(a):
    a = as_tensor(a)
    out = Tensor(a.value * a.value, (a,), "square")
    out._backward = lambda g: a._accumulate(2.0 * a.value * g)
    return out


def sqrt(a):
    a = as_tensor(a)
    v = np.sqrt(a.value)
    out = Tensor(v, (a,), "sqrt")
    out._backward = lambda g: a._accumulate(0.5 * g / v)
    return out


def exp(a):
    a = as_tensor(a)
    v = np.exp(a.value)
    out = Tensor(v, (a,), "exp")
    out._backward = lambda g: a._accumulate(g * v)
    return out


def tanh(a):
    a = as_tensor(a)
    t = np.tanh(a.value)
    out = Tensor(t, (a,), "tanh")
    out._backward = lambda g: a._accumulate(g * (1.0 - t * t))
    return out


def leaky(a, slope=0.2):
    a = as_tensor(a)
    pos = a.value >= 0
    out = Tensor(np.where(pos, a.value, slope * a.value), (a,), "leaky")
    out._backward = lambda g: a._accumulate(np.where(pos, g, slope * g))
    return out


def softplus(a):
    """log(1 + exp(a)), stable for large |a|."""
    a = as_tensor(a)
    x = a.value
    out = Tensor(np.logaddexp(0.0, x), (a,), "softplus")

    def backward(g):
        a._accumulate(g * _sigmoid(x))

    out._backward = backward
    return out


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


sigmoid_np = _sigmoid


# ---------------------------------------------------------------------------
# reductions and indexing


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    out = Tensor(np.sum(a.value, axis=axis, keepdims=axis is not None), (a,), "sum")
    out._backward = lambda g: a._accumulate(np.broadcast_to(g, a.shape))
    return out


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    out = Tensor(np.mean(a.value, axis=axis, keepdims=axis is not None), (a,), "mean")
    out._backward = lambda g: a._accumulate(np.broadcast_to(g / n, a.shape))
    return out


def take_cols(a, cols):
    """Column subset of a matrix; ``cols`` is an int, slice or index array."""
    a = as_tensor(a)
    if isinstance(cols, (int, np.integer)):
        cols = slice(int(cols), int(cols) + 1)
    out = Tensor(a.value[:, cols], (a,), "take_cols")

    def backward(g):
        if not a.requires_grad:
            return
        full = np.zeros_like(a.value)
        if isinstance(cols, slice):
            full[:, cols] = g
        else:
            np.add.at(full, (slice(None), cols), g)
        a._accumulate(full)

    out._backward = backward
    return out


def gather_rows(a, rows):
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    out = Tensor(a.value[rows], (a,), "gather_rows")

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.value)
            np.add.at(full, rows, g)
            a._accumulate(full)

    out._backward = backward
    return out


def transpose(a):
    a = as_tensor(a)
    out = Tensor(a.value.T, (a,), "transpose")
    out._backward = lambda g: a._accumulate(g.T)
    return out


def concat_cols(parts):
    parts = [as_tensor(p) for p in parts]
    widths = [p.shape[1] for p in parts]
    out = Tensor(np.concatenate([p.value for p in parts], axis=1), tuple(parts), "concat_cols")

    def backward(g):
        start = 0
        for p, w in zip(parts, widths):
            p._accumulate(g[:, start:start + w])
            start += w

    out._backward = backward
    return out


ACTIVATIONS = {
    "smooth-sigmoid-like": tanh,
    "leaky-affine": leaky,
}
