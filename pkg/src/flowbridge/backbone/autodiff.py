"""Minimal reverse-mode automatic differentiation over numpy arrays.

Each :class:`Tensor` records its parents and a closure that pushes the output
gradient back to them. ``backward()`` walks the graph in reverse topological
order. Only what the backbone needs is implemented.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit as _sigmoid

from ..errors import GraphNotRecordedError


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, parents=(), backward=None, requires_grad=False):
        data = np.asarray(data)
        # float32 is kept for fast inference; everything else is promoted
        self.data = data if data.dtype == np.float32 else data.astype(float, copy=False)
        self.parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    # -- graph traversal -------------------------------------------------

    def backward(self, grad=None):
        if not self.requires_grad:
            raise GraphNotRecordedError("value does not depend on any parameter")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar")
            grad = np.ones_like(self.data)
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
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=float)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.dtype != parent.data.dtype:
                    pg = pg.astype(parent.data.dtype)
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor(self.data + other.data, (self, other),
                      lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)))

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor(a.data * b.data, (a, b),
                      lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                                 _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        return self * other.reciprocal()

    def __rtruediv__(self, other):
        return as_tensor(other) * self.reciprocal()

    def reciprocal(self):
        out = 1.0 / self.data
        return Tensor(out, (self,), lambda g: (-g * out * out,))

    def __pow__(self, p):
        p = float(p)
        x = self.data
        return Tensor(x ** p, (self,), lambda g: (g * p * x ** (p - 1.0),))

    def square(self):
        x = self.data
        return Tensor(x * x, (self,), lambda g: (2.0 * g * x,))

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            ga = gb = None
            if a.requires_grad:
                if b.ndim == 1:
                    ga = _unbroadcast(g[..., None] * b.data, a.shape)
                else:
                    ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
            if b.requires_grad:
                if b.ndim == 2 and a.ndim >= 2:
                    # fold all leading dims into one contraction
                    gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                elif b.ndim == 1:
                    gb = np.tensordot(g, a.data, axes=(tuple(range(g.ndim)), tuple(range(g.ndim))))
                else:
                    gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            return ga, gb

        return Tensor(a.data @ b.data, (a, b), back)

    # -- reductions and shape ops -------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        old = self.shape
        return Tensor(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def expand_dims(self, axis):
        old = self.shape
        return Tensor(np.expand_dims(self.data, axis), (self,), lambda g: (g.reshape(old),))

    def swapaxes(self, a1, a2):
        return Tensor(np.swapaxes(self.data, a1, a2), (self,),
                      lambda g: (np.swapaxes(g, a1, a2),))

    def __getitem__(self, idx):
        shape = self.shape

        def back(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor(self.data[idx], (self,), back)

    # -- elementwise nonlinearities ---------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return Tensor(out, (self,), lambda g: (g * out,))

    def log(self, floor=0.0):
        """Natural log; with ``floor > 0`` values below it are clamped (zero gradient)."""
        x = self.data
        if floor > 0:
            clamped = x < floor
            xs = np.where(clamped, floor, x)
            return Tensor(np.log(xs), (self,), lambda g: (np.where(clamped, 0.0, g / xs),))
        return Tensor(np.log(x), (self,), lambda g: (g / x,))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor(out, (self,), lambda g: (g * (1.0 - out * out),))

    def sigmoid(self):
        out = _sigmoid(self.data)
        return Tensor(out, (self,), lambda g: (g * out * (1.0 - out),))

    def silu(self):
        x = self.data
        s = 0.5 + 0.5 * np.tanh(0.5 * x)
        return Tensor(x * s, (self,), lambda g: (g * (s + x * s * (1.0 - s)),))

    def softmax(self, axis=-1):
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=axis, keepdims=True)

        def back(g):
            return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

        return Tensor(out, (self,), back)

    def log_sigmoid(self):
        x = self.data
        out = -np.logaddexp(0.0, -x)
        return Tensor(out, (self,), lambda g: (g * _sigmoid(-x),))


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, dtype=float):
    return Tensor(np.array(data, dtype=dtype, copy=True), requires_grad=True)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(np.where(cond, a.data, b.data), (a, b),
                  lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                             _unbroadcast(np.where(cond, 0.0, g), b.shape)))
