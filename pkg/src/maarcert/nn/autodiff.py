"""Tape-free reverse-mode differentiation over numpy arrays.

Each :class:`Var` remembers its parents and a closure mapping the output
gradient to parent gradients. ``backward`` walks the graph in reverse
topological order. Only the operations defined here are differentiable;
anything else must be kept outside the graph.
"""
from __future__ import annotations

import numpy as np

from .. import kernels
from ..errors import UnsupportedOpError


class Var:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, parents=(), backward=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

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

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.value)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_var(x) -> Var:
    if isinstance(x, Var):
        return x
    if isinstance(x, (int, float, np.floating, np.integer, np.ndarray)):
        return Var(x)
    raise UnsupportedOpError(f"cannot differentiate through object of type {type(x).__name__}")


def _node(value, parents, backward):
    if any(p.requires_grad for p in parents):
        return Var(value, parents, backward, requires_grad=True)
    return Var(value)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _node(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _node(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Var:
    a = as_var(a)
    return _node(np.log(a.value), (a,), lambda g: (g / a.value,))


def relu(a) -> Var:
    a = as_var(a)
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def reshape(a, shape) -> Var:
    a = as_var(a)
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def sum(a, axis=None) -> Var:  # noqa: A001 - mirrors numpy naming
    a = as_var(a)
    out = a.value.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _node(out, (a,), back)


def mean(a, axis=None) -> Var:
    a = as_var(a)
    count = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / count)


def take_along_last(a, index) -> Var:
    """Select ``a[..., index[...]]`` (one entry per row of the last axis)."""
    a = as_var(a)
    idx = np.asarray(index, dtype=np.int64)[..., None]
    out = np.take_along_axis(a.value, idx, axis=-1)[..., 0]

    def back(g):
        full = np.zeros(a.shape)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return _node(out, (a,), back)


def softmax(z) -> Var:
    """Softmax over the last axis with max-subtraction."""
    z = as_var(z)
    shifted = z.value - z.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (z,), back)


def dense(x, weight, bias) -> Var:
    """``x @ weight.T + bias`` with ``x`` flattened to (N, in)."""
    x, weight, bias = as_var(x), as_var(weight), as_var(bias)
    xs = x.value.reshape(x.shape[0], -1)
    out = xs @ weight.value.T + bias.value

    def back(g):
        gx = (g @ weight.value).reshape(x.shape) if x.requires_grad else None
        gw = g.T @ xs if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _node(out, (x, weight, bias), back)


def conv2d(x, kernel, bias, stride=1, padding=0) -> Var:
    x, kernel, bias = as_var(x), as_var(kernel), as_var(bias)
    out = kernels.conv2d_forward(x.value, kernel.value, bias.value, stride, padding)

    def back(g):
        need_w = kernel.requires_grad or bias.requires_grad
        return kernels.conv2d_backward(g, x.value, kernel.value, stride, padding, x.requires_grad, need_w)

    return _node(out, (x, kernel, bias), back)
