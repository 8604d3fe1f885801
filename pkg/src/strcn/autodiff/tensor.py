"""Tensor type with a reverse-mode tape."""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def check_finite(values: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    return values


class Tensor:
    """A float64 array that records how it was computed.

    Only tensors created with ``requires_grad=True`` (or derived from one) take
    part in :meth:`backward`. Gradients accumulate into ``grad`` until
    :meth:`zero_grad` is called.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: Sequence["Tensor"] = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
        op: str = "leaf",
    ):
        arr = np.asarray(data, dtype=np.float64)
        self.data = check_finite(arr, op)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} != value shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Backpropagate from this tensor through the recorded graph."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                check_finite(node.grad, f"backward of {node.op}")
                node._backward(node.grad)
        # intermediate gradients are not needed after the pass
        for node in order:
            if node._parents:
                node.grad = None

    # elementwise arithmetic -------------------------------------------------

    def __add__(self, other) -> "Tensor":
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return add(self, -as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return add(as_tensor(other), -self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul(self, as_tensor(-1.0))

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, as_tensor(other))

    def sum(self) -> "Tensor":
        return total(self)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _backward=backward if needs else None, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return make(a.data + b.data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return make(a.data * b.data, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return make(a.data @ b.data, (a, b), backward, "matmul")


def total(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return make(np.asarray(a.data.sum()), (a,), backward, "sum")


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return make(a.data.reshape(shape), (a,), backward, "reshape")
