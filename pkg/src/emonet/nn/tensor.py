"""Reverse-mode autodiff tape.

A Tensor wraps a numpy array plus the closure that routes its output
gradient to its parents. Ops (see ops.py) build the graph eagerly; calling
backward() on a scalar loss walks the tape once in reverse topological
order. Arrays stay in whatever float dtype they were created with (float32
for training, float64 for gradient checks).
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        kind = type(self).__name__
        return f"{kind}(shape={self.value.shape}, dtype={self.value.dtype})"


class Parameter(Tensor):
    """Named leaf tensor with a momentum buffer for SGD."""

    __slots__ = ("name", "velocity")

    def __init__(self, name: str, value):
        super().__init__(value)
        self.name = name
        self.velocity = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    """Add a gradient contribution to a node, allocating on first touch."""
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.value)
    tensor.grad += grad


def backward(loss: Tensor) -> None:
    """Populate .grad over the graph below a scalar loss node."""
    if loss.value.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")

    # Iterative post-order DFS; recursion would be depth-limited on deep nets.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    for node in topo:
        node.grad = None
    loss.grad = np.ones((), dtype=loss.value.dtype)
    for node in reversed(topo):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None
