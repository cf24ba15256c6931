"""Reverse-mode autodiff tape over numpy arrays.

Small define-by-run graph: every operation returns a `Tensor` that remembers
its parents and a closure computing parent gradients from the output
gradient. `Tensor.backward()` walks the graph once in reverse topological
order. Training runs in float32; gradient checks build the same graphs in
float64 (dtype follows the arrays, nothing is hardcoded).

Only `Parameter` leaves keep their gradients across calls; intermediate
gradients are discarded when `backward()` returns.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """A node in the computation graph wrapping an ndarray."""

    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> np.ndarray:
        return np.array(self.data, copy=True)

    def backward(self) -> None:
        """Accumulate gradients of this scalar into all reachable leaves."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node.backward_fn is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g.copy() if isinstance(parent, Parameter) else g
                else:
                    parent.grad += g
            if not isinstance(node, Parameter):
                node.grad = None  # free intermediate storage eagerly

    # Operator sugar; implementations live in nnmath.ops to keep this file
    # limited to the tape mechanics.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Named trainable leaf. Gradients accumulate across backward calls."""

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, value, trainable: bool = True):
        value = np.asarray(value)
        super().__init__(value, requires_grad=trainable)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def constant(data, dtype=None) -> Tensor:
    """Wrap an array as a graph constant (no gradient)."""
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr)


_grad_enabled = True


class no_grad:
    """Context manager suspending tape construction.

    Evaluation passes (retrieval scoring runs thousands of forwards) need
    values only; inside the context every op returns a plain value node, so
    no closures or parent links are retained.
    """

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def result(data, parents, backward_fn) -> Tensor:
    """Build an op output, skipping tape bookkeeping when nothing upstream
    needs gradients (keeps inference passes allocation-light)."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, parents=parents, backward_fn=backward_fn, requires_grad=True)
    return Tensor(data)


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order from `root`, iterative (graphs can hold
    thousands of nodes per training step)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    order.reverse()
    return order


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad
