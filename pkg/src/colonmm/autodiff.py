"""Minimal reverse-mode autodiff over float64 numpy arrays.

Just enough machinery for the adapter and the toy causal LM: broadcast-aware
elementwise ops, batched matmul, reductions, shape ops, gather/scatter, and
the exact-erf GELU. Gradients are accumulated into ``Tensor.grad`` by
``backward()`` on a scalar.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ShapeError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return mul(self, power(as_tensor(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def tracked(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in tensors)


def make_node(data, parents, backward) -> Tensor:
    if any(tracked(p) for p in parents):
        return Tensor(data, parents=parents, backward=backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(grad):
        if tracked(a):
            a.accumulate(_unbroadcast(grad, a.data.shape))
        if tracked(b):
            b.accumulate(_unbroadcast(grad, b.data.shape))

    return make_node(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(grad):
        if tracked(a):
            a.accumulate(_unbroadcast(grad * b.data, a.data.shape))
        if tracked(b):
            b.accumulate(_unbroadcast(grad * a.data, b.data.shape))

    return make_node(out_data, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out_data = a.data ** exponent

    def backward(grad):
        if tracked(a):
            a.accumulate(grad * exponent * a.data ** (exponent - 1.0))

    return make_node(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(grad):
        if tracked(a):
            a.accumulate(grad * out_data)

    return make_node(out_data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(grad):
        if tracked(a):
            a.accumulate(grad / a.data)

    return make_node(out_data, (a,), backward)


def gelu(a) -> Tensor:
    """Exact-erf GELU: x/2 * (1 + erf(x / sqrt(2)))."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out_data = x * cdf

    def backward(grad):
        if tracked(a):
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
            a.accumulate(grad * (cdf + x * pdf))

    return make_node(out_data, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data

    def backward(grad):
        if tracked(a):
            ga = grad @ np.swapaxes(b.data, -1, -2)
            a.accumulate(_unbroadcast(ga, a.data.shape))
        if tracked(b):
            gb = np.swapaxes(a.data, -1, -2) @ grad
            b.accumulate(_unbroadcast(gb, b.data.shape))

    return make_node(out_data, (a, b), backward)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(grad):
        if not tracked(a):
            return
        g = grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.data.shape).copy())

    return make_node(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(grad):
        if tracked(a):
            a.accumulate(grad.reshape(a.data.shape))

    return make_node(out_data, (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out_data = np.transpose(a.data, axes)

    def backward(grad):
        if tracked(a):
            inverse = None if axes is None else np.argsort(axes)
            a.accumulate(np.transpose(grad, inverse))

    return make_node(out_data, (a,), backward)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out_data = a.data[key]

    def backward(grad):
        if tracked(a):
            full = np.zeros_like(a.data)
            np.add.at(full, key, grad)
            a.accumulate(full)

    return make_node(out_data, (a,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(grad):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if tracked(t):
                index = [slice(None)] * grad.ndim
                index[axis] = slice(start, stop)
                t.accumulate(grad[tuple(index)])

    return make_node(out_data, tuple(tensors), backward)


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(grad):
        pieces = np.split(grad, len(tensors), axis=axis)
        for t, piece in zip(tensors, pieces):
            if tracked(t):
                t.accumulate(np.squeeze(piece, axis=axis))

    return make_node(out_data, tuple(tensors), backward)


def take_rows(table, indices) -> Tensor:
    """Row gather (embedding lookup): ``table[indices]`` along axis 0."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    out_data = table.data[idx]

    def backward(grad):
        if tracked(table):
            full = np.zeros_like(table.data)
            np.add.at(full, idx, grad)
            table.accumulate(full)

    return make_node(out_data, (table,), backward)


def take_along_last(a, indices) -> Tensor:
    """Pick one entry per row along the last axis (class-logit gather)."""
    a = as_tensor(a)
    idx = np.expand_dims(np.asarray(indices), -1)
    out_data = np.take_along_axis(a.data, idx, axis=-1)[..., 0]

    def backward(grad):
        if tracked(a):
            full = np.zeros_like(a.data)
            np.put_along_axis(full, idx, np.expand_dims(grad, -1), axis=-1)
            a.accumulate(full)

    return make_node(out_data, (a,), backward)


def log_softmax(a, axis=-1) -> Tensor:
    """Numerically stable log-softmax (constant max-shift is exact)."""
    a = as_tensor(a)
    shift = a.data.max(axis=axis, keepdims=True)
    shifted = add(a, Tensor(-shift))
    return shifted - log(tsum(exp(shifted), axis=axis, keepdims=True))


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shift = a.data.max(axis=axis, keepdims=True)
    e = exp(add(a, Tensor(-shift)))
    return mul(e, power(tsum(e, axis=axis, keepdims=True), -1.0))
