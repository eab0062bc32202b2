"""SGD with momentum and coupled l2 regularization.

Update rule per parameter:
    v <- momentum * v + (grad + l2 * param)
    param <- param - lr * v
"""

from __future__ import annotations

from typing import Iterable

from .tensor import Parameter


def sgd_step(
    params: Iterable[Parameter],
    lr: float,
    momentum: float = 0.9,
    l2: float = 1e-6,
) -> None:
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name} has no gradient; run backward first")
        grad = p.grad + l2 * p.value
        p.velocity *= momentum
        p.velocity += grad
        p.value -= lr * p.velocity
