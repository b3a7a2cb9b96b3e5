"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every value in the fusion pipeline and the toy denoiser is a `Tensor`
wrapping a float64 ndarray. Ops build a dynamic graph; `backward()` on a
scalar loss walks it in reverse topological order and accumulates exact
analytic gradients into the leaves marked `requires_grad`. The finite
difference harness in `gradcheck` is the independent check on these
closed-form backward rules, never a substitute for them.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class Tensor:
    """A graph node: float64 data, optional grad, and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[Array], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Seed d(self)/d(self) = 1 and backpropagate; self must be scalar."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar node")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar; each delegates to a module-level op.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    """Wrap data as a non-trainable graph input."""
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    """Wrap data as a trainable leaf."""
    return Tensor(data, requires_grad=True)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcasted gradient back to the parent's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data
    req = a.requires_grad or b.requires_grad

    def backward(g: Array) -> None:
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return Tensor(out_data, req, (a, b), backward if req else None)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data
    req = a.requires_grad or b.requires_grad

    def backward(g: Array) -> None:
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.data.shape))

    return Tensor(out_data, req, (a, b), backward if req else None)


def mul(a, b) -> Tensor:
    """Elementwise (broadcasting) product; either side may be a scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data
    req = a.requires_grad or b.requires_grad

    def backward(g: Array) -> None:
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, req, (a, b), backward if req else None)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: {a.data.shape} @ {b.data.shape}"
        )
    out_data = a.data @ b.data
    req = a.requires_grad or b.requires_grad

    def backward(g: Array) -> None:
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return Tensor(out_data, req, (a, b), backward if req else None)


def transpose(a: Tensor) -> Tensor:
    out_data = a.data.T

    def backward(g: Array) -> None:
        a.accumulate(g.T)

    return Tensor(out_data, a.requires_grad, (a,), backward if a.requires_grad else None)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(g: Array) -> None:
        a.accumulate(g * (1.0 - y * y))

    return Tensor(y, a.requires_grad, (a,), backward if a.requires_grad else None)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction; rows of the output sum to 1."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g: Array) -> None:
        # d softmax: y * (g - <g, y> per row)
        dot = (g * y).sum(axis=-1, keepdims=True)
        a.accumulate(y * (g - dot))

    return Tensor(y, a.requires_grad, (a,), backward if a.requires_grad else None)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows by index; gradients scatter-add back to the source rows."""
    idx = np.asarray(indices, dtype=np.int64)
    out_data = a.data[idx]

    def backward(g: Array) -> None:
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        a.accumulate(ga)

    return Tensor(out_data, a.requires_grad, (a,), backward if a.requires_grad else None)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    out_data = a.data[:, start:stop]

    def backward(g: Array) -> None:
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        a.accumulate(ga)

    return Tensor(out_data, a.requires_grad, (a,), backward if a.requires_grad else None)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=1)
    req = any(p.requires_grad for p in parts)
    widths = [p.data.shape[1] for p in parts]

    def backward(g: Array) -> None:
        offset = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                p.accumulate(g[:, offset:offset + w])
            offset += w

    return Tensor(out_data, req, tuple(parts), backward if req else None)


def sum_all(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.sum())

    def backward(g: Array) -> None:
        a.accumulate(np.full_like(a.data, float(g)))

    return Tensor(out_data, a.requires_grad, (a,), backward if a.requires_grad else None)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out_data = np.asarray(a.data.mean())

    def backward(g: Array) -> None:
        a.accumulate(np.full_like(a.data, float(g) / n))

    return Tensor(out_data, a.requires_grad, (a,), backward if a.requires_grad else None)
