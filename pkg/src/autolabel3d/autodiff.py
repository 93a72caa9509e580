"""A small tape-free reverse-mode autodiff engine over numpy arrays.

Each :class:`Tensor` remembers its parents and a closure that pushes its
gradient back to them. :func:`backward` walks the graph in reverse
topological order. Only the primitives defined in this module are
differentiable; handing a Tensor to an arbitrary numpy function raises a
``TypeError`` when the graph is built, not silently later.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")
    __array_ufunc__ = None  # refuse numpy ufuncs: unsupported primitive

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)


def param(value) -> Tensor:
    """A leaf that collects a gradient."""
    return Tensor(value, requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _node(value, parents, fn):
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(value)
    return Tensor(value, parents, fn)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.value + b.value, (a, b), fn)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _node(a.value - b.value, (a, b), fn)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        return (_unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.value, b.shape) if b.requires_grad else None)

    return _node(a.value * b.value, (a, b), fn)


def matmul(a, b):
    """2-D matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise TypeError("matmul supports 2-D operands only")

    def fn(g):
        return (g @ b.value.T if a.requires_grad else None,
                a.value.T @ g if b.requires_grad else None)

    return _node(a.value @ b.value, (a, b), fn)


def relu(x):
    x = as_tensor(x)
    on = x.value > 0

    def fn(g):
        return (g * on,)

    return _node(np.where(on, x.value, 0.0), (x,), fn)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.value)

    def fn(g):
        return (g * out,)

    return _node(out, (x,), fn)


def log(x):
    x = as_tensor(x)

    def fn(g):
        return (g / x.value,)

    return _node(np.log(x.value), (x,), fn)


def square(x):
    x = as_tensor(x)

    def fn(g):
        return (2.0 * g * x.value,)

    return _node(x.value * x.value, (x,), fn)


def sin(x):
    x = as_tensor(x)

    def fn(g):
        return (g * np.cos(x.value),)

    return _node(np.sin(x.value), (x,), fn)


def cos(x):
    x = as_tensor(x)

    def fn(g):
        return (-g * np.sin(x.value),)

    return _node(np.cos(x.value), (x,), fn)


def atan2(y, x):
    """Angle of (x, y); the gradient at the origin is taken as zero."""
    y, x = as_tensor(y), as_tensor(x)
    r2 = x.value ** 2 + y.value ** 2
    safe = np.where(r2 > 0, r2, 1.0)

    def fn(g):
        return g * np.where(r2 > 0, x.value / safe, 0.0), g * np.where(r2 > 0, -y.value / safe, 0.0)

    return _node(np.arctan2(y.value, x.value), (y, x), fn)


def clip(x, lo, hi):
    x = as_tensor(x)
    inside = (x.value >= lo) & (x.value <= hi)

    def fn(g):
        return (g * inside,)

    return _node(np.clip(x.value, lo, hi), (x,), fn)


def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _node(x.value.sum(axis=axis), (x,), fn)


def mean(x, axis=None):
    x = as_tensor(x)
    n = x.value.size if axis is None else x.value.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def take(x, idx):
    """Row/element selection ``x[idx]``; repeated indices accumulate."""
    x = as_tensor(x)

    def fn(g):
        out = np.zeros_like(x.value)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.value[idx], (x,), fn)


def concat(parts, axis=-1):
    parts = [as_tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def fn(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([p.value for p in parts], axis=axis), parts, fn)


def reshape(x, shape):
    x = as_tensor(x)

    def fn(g):
        return (g.reshape(x.shape),)

    return _node(x.value.reshape(shape), (x,), fn)


def repeat_rows(x, counts):
    """Row b of ``x`` repeated ``counts[b]`` times (ragged broadcast)."""
    x = as_tensor(x)
    counts = np.asarray(counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])

    def fn(g):
        return (np.add.reduceat(g, starts, axis=0),)

    return _node(np.repeat(x.value, counts, axis=0), (x,), fn)


def segment_sum(x, offsets):
    """Sum contiguous row blocks ``x[offsets[b]:offsets[b+1]]``; blocks are non-empty."""
    x = as_tensor(x)
    offsets = np.asarray(offsets)
    counts = np.diff(offsets)

    def fn(g):
        return (np.repeat(g, counts, axis=0),)

    return _node(np.add.reduceat(x.value, offsets[:-1], axis=0), (x,), fn)


def segment_mean(x, offsets):
    counts = np.diff(np.asarray(offsets)).astype(np.float64)
    s = segment_sum(x, offsets)
    scale = 1.0 / counts.reshape((-1,) + (1,) * (s.value.ndim - 1))
    return mul(s, scale)


def segment_max(x, offsets):
    """Column-wise max over contiguous row blocks of a 2-D tensor.

    The gradient goes to the first row attaining the max in each block.
    """
    x = as_tensor(x)
    offsets = np.asarray(offsets)
    out = np.maximum.reduceat(x.value, offsets[:-1], axis=0)

    def fn(g):
        grad = np.zeros_like(x.value)
        cols = np.arange(x.shape[1])
        for b in range(len(offsets) - 1):
            lo, hi = offsets[b], offsets[b + 1]
            rows = lo + np.argmax(x.value[lo:hi], axis=0)
            grad[rows, cols] += g[b]
        return (grad,)

    return _node(out, (x,), fn)


def max_reduce(x, axis=0):
    """Max along ``axis``; gradient to the first argmax."""
    x = as_tensor(x)
    arg = np.argmax(x.value, axis=axis)

    def fn(g):
        grad = np.zeros_like(x.value)
        np.put_along_axis(grad, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _node(np.max(x.value, axis=axis), (x,), fn)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, targets):
    """Per-row ``-log softmax(logits)[target]`` for 2-D logits, shape (B,)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    lsm = log_softmax(logits.value)
    rows = np.arange(len(targets))

    def fn(g):
        p = np.exp(lsm)
        p[rows, targets] -= 1.0
        return (p * g[:, None],)

    return _node(-lsm[rows, targets], (logits,), fn)


def _topological(out):
    order, seen = [], set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(out: Tensor, seed=None) -> None:
    """Accumulate d(out)/d(leaf) into ``.grad`` of every leaf requiring it."""
    if not out.requires_grad:
        return
    grads = {id(out): np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=np.float64)}
    for node in reversed(_topological(out)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


def grad(out: Tensor, wrt):
    """Gradients of scalar ``out`` with respect to each leaf in ``wrt``."""
    for t in wrt:
        t.grad = None
    backward(out)
    return [np.zeros_like(t.value) if t.grad is None else t.grad for t in wrt]
