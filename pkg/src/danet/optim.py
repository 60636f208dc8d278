"""SGD with heavy-ball momentum and L2 weight decay, plus step lr decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class SgdState:
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("lr", "momentum", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def sgd_step(
    params: Sequence[Tensor],
    state: SgdState,
    grads: Optional[Sequence[Optional[np.ndarray]]] = None,
) -> None:
    """Update ``params`` in place.

    ``g' = g + wd * w``, ``v <- momentum * v + g'``, ``w <- w - lr * v``.
    Gradients default to each parameter's ``grad`` buffer; parameters with
    no gradient are left untouched.
    """
    if grads is None:
        grads = [p.grad for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        g = g + state.weight_decay * p.data if state.weight_decay else g
        v = state.velocity.get(i)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.data.shape:
            raise ValueError(f"velocity shape {v.shape} does not match parameter {p.shape}")
        v = state.momentum * v + g
        state.velocity[i] = v.astype(p.data.dtype, copy=False)
        p.data = p.data - (state.lr * v).astype(p.data.dtype, copy=False)


def step_lr(base_lr: float, epoch: int, milestones: Sequence[int], factor: float = 0.1) -> float:
    """Learning rate for a zero-based ``epoch``; decays once each milestone epoch is reached.

    A milestone ``m`` takes effect once ``m`` epochs have completed, so with
    milestones (20, 28) over 30 epochs the rate is cut for the last 10 and
    again for the last 2.
    """
    passed = sum(1 for m in milestones if epoch >= m)
    return base_lr * factor**passed
