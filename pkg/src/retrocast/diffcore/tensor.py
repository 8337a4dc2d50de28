"""Reverse-mode automatic differentiation over double-precision numpy arrays.

A :class:`Tensor` wraps an ``np.ndarray`` and records the operations applied
to it; calling :meth:`Tensor.backward` on a scalar result fills the ``grad``
slot of every tensor that contributed to it. Only the primitives the decoders
actually need are provided; broadcasting follows numpy semantics and the
adjoint is summed back down to the operand's shape.
"""

from __future__ import annotations

from typing import Iterable, Sequence, Union

import numpy as np

ArrayLike = Union[float, int, Sequence, np.ndarray, "Tensor"]


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _index_add(buf: np.ndarray, key, grad: np.ndarray) -> None:
    """buf[key] += grad, handling repeated indices in advanced indexing."""
    parts = key if isinstance(key, tuple) else (key,)
    fancy = any(isinstance(p, (np.ndarray, list)) for p in parts)
    if fancy:
        np.add.at(buf, key, grad)
    else:
        buf[key] += grad


class Tensor:
    """Node of the reverse-mode computation graph."""

    __slots__ = ("value", "grad", "_parents", "_grad_fn")

    def __init__(self, value: ArrayLike, _parents=(), _grad_fn=None):
        if isinstance(value, Tensor):
            value = value.value
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = _parents
        self._grad_fn = _grad_fn

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        """Constant copy sharing the same values; blocks gradient flow."""
        return Tensor(self.value)

    # -- autodiff ------------------------------------------------------
    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Backpropagate from this node. Without a seed, requires a scalar."""
        if seed is None:
            if self.value.size != 1:
                raise ShapeMismatchError(
                    f"backward() without seed needs a scalar, got shape {self.shape}"
                )
            seed = np.ones_like(self.value)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.asarray(seed, dtype=np.float64))
        for node in reversed(topo):
            if node._grad_fn is not None and node.grad is not None:
                node._grad_fn(node.grad)

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        out = Tensor(self.value + other.value, (self, other))

        def gfn(g, a=self, b=other):
            a._accum(_unbroadcast(g, a.shape))
            b._accum(_unbroadcast(g, b.shape))

        out._grad_fn = gfn
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = Tensor(-self.value, (self,))
        out._grad_fn = lambda g, a=self: a._accum(-g)
        return out

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        out = Tensor(self.value * other.value, (self, other))

        def gfn(g, a=self, b=other):
            a._accum(_unbroadcast(g * b.value, a.shape))
            b._accum(_unbroadcast(g * a.value, b.shape))

        out._grad_fn = gfn
        return out

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        out = Tensor(self.value / other.value, (self, other))

        def gfn(g, a=self, b=other):
            a._accum(_unbroadcast(g / b.value, a.shape))
            b._accum(_unbroadcast(-g * a.value / (b.value ** 2), b.shape))

        out._grad_fn = gfn
        return out

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        out = Tensor(self.value ** exponent, (self,))

        def gfn(g, a=self, n=exponent):
            a._accum(g * n * a.value ** (n - 1))

        out._grad_fn = gfn
        return out

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ShapeMismatchError(
                f"matmul needs >=2-D operands, got {self.shape} @ {other.shape}"
            )
        try:
            val = self.value @ other.value
        except ValueError as exc:
            raise ShapeMismatchError(
                f"matmul shape mismatch: {self.shape} @ {other.shape}"
            ) from exc
        out = Tensor(val, (self, other))

        def gfn(g, a=self, b=other):
            a._accum(_unbroadcast(g @ b.value.swapaxes(-1, -2), a.shape))
            b._accum(_unbroadcast(a.value.swapaxes(-1, -2) @ g, b.shape))

        out._grad_fn = gfn
        return out

    # -- elementwise functions ----------------------------------------
    def exp(self) -> "Tensor":
        val = np.exp(self.value)
        out = Tensor(val, (self,))
        out._grad_fn = lambda g, a=self, v=val: a._accum(g * v)
        return out

    def log(self) -> "Tensor":
        out = Tensor(np.log(self.value), (self,))
        out._grad_fn = lambda g, a=self: a._accum(g / a.value)
        return out

    def sqrt(self) -> "Tensor":
        val = np.sqrt(self.value)
        out = Tensor(val, (self,))
        out._grad_fn = lambda g, a=self, v=val: a._accum(g * 0.5 / v)
        return out

    def sin(self) -> "Tensor":
        out = Tensor(np.sin(self.value), (self,))
        out._grad_fn = lambda g, a=self: a._accum(g * np.cos(a.value))
        return out

    def cos(self) -> "Tensor":
        out = Tensor(np.cos(self.value), (self,))
        out._grad_fn = lambda g, a=self: a._accum(-g * np.sin(a.value))
        return out

    def abs(self) -> "Tensor":
        out = Tensor(np.abs(self.value), (self,))
        out._grad_fn = lambda g, a=self: a._accum(g * np.sign(a.value))
        return out

    def relu(self) -> "Tensor":
        out = Tensor(np.maximum(self.value, 0.0), (self,))
        out._grad_fn = lambda g, a=self: a._accum(g * (a.value > 0.0))
        return out

    def sigmoid(self) -> "Tensor":
        val = 1.0 / (1.0 + np.exp(-self.value))
        out = Tensor(val, (self,))
        out._grad_fn = lambda g, a=self, v=val: a._accum(g * v * (1.0 - v))
        return out

    def softplus(self) -> "Tensor":
        # numerically stable log(1 + exp(x))
        val = np.logaddexp(0.0, self.value)
        out = Tensor(val, (self,))

        def gfn(g, a=self):
            a._accum(g / (1.0 + np.exp(-a.value)))

        out._grad_fn = gfn
        return out

    def tanh(self) -> "Tensor":
        val = np.tanh(self.value)
        out = Tensor(val, (self,))
        out._grad_fn = lambda g, a=self, v=val: a._accum(g * (1.0 - v ** 2))
        return out

    # -- reductions ----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = Tensor(self.value.sum(axis=axis, keepdims=keepdims), (self,))

        def gfn(g, a=self, axis=axis, keepdims=keepdims):
            if axis is None:
                a._accum(np.broadcast_to(g, a.shape))
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape))

        out._grad_fn = gfn
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if np.isscalar(axis) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- structural ops ------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.value.reshape(shape), (self,))
        out._grad_fn = lambda g, a=self: a._accum(g.reshape(a.shape))
        return out

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        out = Tensor(self.value.transpose(axes), (self,))
        out._grad_fn = lambda g, a=self, inv=tuple(inv): a._accum(g.transpose(inv))
        return out

    def __getitem__(self, key) -> "Tensor":
        out = Tensor(self.value[key], (self,))

        def gfn(g, a=self, key=key):
            buf = np.zeros_like(a.value)
            _index_add(buf, key, g)
            a._accum(buf)

        out._grad_fn = gfn
        return out


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def gfn(g, parts=tensors, splits=splits, axis=axis):
        for part, piece in zip(parts, np.split(g, splits, axis=axis)):
            part._accum(piece)

    out._grad_fn = gfn
    return out


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.value for t in tensors], axis=axis), tuple(tensors))

    def gfn(g, parts=tensors, axis=axis):
        for i, part in enumerate(parts):
            part._accum(np.take(g, i, axis=axis))

    out._grad_fn = gfn
    return out
