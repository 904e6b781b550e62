"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Tensors wrap numpy arrays and record a computation graph whenever gradients
are enabled and an input requires them.  ``backward`` walks the graph in
reverse topological order; repeated calls accumulate into ``grad``.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, scoring)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense real array with optional gradient accumulation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=float)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    # -- graph construction helpers -------------------------------------

    @staticmethod
    def _coerce(value) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    def _walk(self):
        """Iterative post-order over the recorded graph."""
        order, visited, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        return order

    def backward(self):
        """Populate gradients of every reachable requires_grad tensor."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        if not self.requires_grad:
            raise ValueError("loss is not connected to any gradient-tracked tensor")
        order = self._walk()
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                node.accumulate_grad(g)
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not (parent.requires_grad or parent._parents):
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg

    # -- operators --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(Tensor._coerce(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])


def make_op(data, parents, backward_fn) -> Tensor:
    """Create a graph node; records parents only while gradients are enabled."""
    tracked = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not tracked:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b):
    a, b = Tensor._coerce(a), Tensor._coerce(b)
    return make_op(a.data + b.data, (a, b),
                   lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))))


def sub(a, b):
    a, b = Tensor._coerce(a), Tensor._coerce(b)
    return make_op(a.data - b.data, (a, b),
                   lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))))


def mul(a, b):
    a, b = Tensor._coerce(a), Tensor._coerce(b)
    return make_op(a.data * b.data, (a, b),
                   lambda g: ((a, _unbroadcast(g * b.data, a.shape)),
                              (b, _unbroadcast(g * a.data, b.shape))))


def div(a, b):
    a, b = Tensor._coerce(a), Tensor._coerce(b)
    return make_op(a.data / b.data, (a, b),
                   lambda g: ((a, _unbroadcast(g / b.data, a.shape)),
                              (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))))


def matmul(a, b):
    a, b = Tensor._coerce(a), Tensor._coerce(b)
    return make_op(a.data @ b.data, (a, b),
                   lambda g: ((a, g @ b.data.T), (b, a.data.T @ g)))


def tsum(a, axis=None, keepdims=False):
    a = Tensor._coerce(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return make_op(out, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = Tensor._coerce(a)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        count = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    a = Tensor._coerce(a)
    return make_op(a.data.reshape(shape), (a,),
                   lambda g: ((a, g.reshape(a.shape)),))


def relu(a):
    a = Tensor._coerce(a)
    mask = a.data > 0
    return make_op(a.data * mask, (a,), lambda g: ((a, g * mask),))


def sigmoid(a):
    a = Tensor._coerce(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return make_op(out, (a,), lambda g: ((a, g * out * (1.0 - out)),))


def tanh(a):
    a = Tensor._coerce(a)
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: ((a, g * (1.0 - out * out)),))


def exp(a):
    a = Tensor._coerce(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: ((a, g * out),))


def log(a):
    a = Tensor._coerce(a)
    return make_op(np.log(a.data), (a,), lambda g: ((a, g / a.data),))


def sqrt(a):
    a = Tensor._coerce(a)
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: ((a, g * 0.5 / out),))


def square(a):
    a = Tensor._coerce(a)
    return mul(a, a)
