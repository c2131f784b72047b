"""Dense tensors with reverse-mode automatic differentiation.

Activations are laid out N x C x H x W; parameters keep their natural rank.
Every op output remembers its inputs and a backward closure; the implicit
graph is ordered by tensor creation, and :meth:`Tensor.backward` replays it
exactly once in reverse creation order, accumulating gradients additively.
The graph is single-writer: one thread builds and differentiates it.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional

import numpy as np

from .errors import ShapeError

_grad_enabled = True
_creation_counter = 0


@contextlib.contextmanager
def no_grad():
    """Suspend graph recording (evaluation, finite differences, plumbing)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy array plus an optional same-shape gradient accumulator.

    ``grad`` exists iff ``requires_grad`` and starts at zero, so a leaf that
    never participates in a backward pass reports an exactly-zero gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        global _creation_counter
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = np.zeros_like(arr) if self.requires_grad else None
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable[[np.ndarray], None]] = None
        _creation_counter += 1
        self._node_id = _creation_counter

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def is_leaf(self) -> bool:
        return not self._parents

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor with ``requires_grad``.

        Visits each graph node once, in reverse creation order, and frees the
        saved closures afterwards; a second backward through the same graph
        raises.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad; nothing to differentiate")
        if self._backward_fn is None and self._parents:
            raise RuntimeError("backward graph has already been freed")

        nodes = self._reachable()
        nodes.sort(key=lambda t: t._node_id, reverse=True)
        self.grad += np.ones_like(self.data)
        for node in nodes:
            fn = node._backward_fn
            if fn is not None:
                fn(node.grad)
                node._backward_fn = None

    def _reachable(self) -> list:
        seen = set()
        out = []
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node.requires_grad:
                out.append(node)
            stack.extend(node._parents)
        return out

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # Arithmetic dunders are attached by fpnkit.ops to avoid an import cycle.
