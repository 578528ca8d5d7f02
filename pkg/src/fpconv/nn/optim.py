"""Heavy-ball momentum SGD and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List

import numpy as np

from fpconv.nn.tensor import Tensor


def cosine_lr(step: int, total: int, lr0: float) -> float:
    """``lr0 * 0.5 * (1 + cos(pi * step / total))`` for ``0 <= step <= total``."""
    if total <= 0 or not 0 <= step <= total:
        raise ValueError(f"cosine_lr needs 0 <= step <= total, got step={step}, total={total}")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total))


@dataclass
class OptimState:
    learning_rate: float
    momentum: float = 0.98
    total_steps: int = 1
    step_count: int = 0
    velocity: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_momentum_step(params: List[Tensor], grads: List[np.ndarray], state: OptimState) -> None:
    """In-place update ``v <- m*v + g; theta <- theta - lr*v``."""
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    if len(grads) != len(params) or len(state.velocity) != len(params):
        raise ValueError("params, grads and velocity buffers must align")
    lr, m = state.learning_rate, state.momentum
    for p, g, v in zip(params, grads, state.velocity):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or v.shape != p.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v *= m
        v += g
        if lr != 0.0:
            p.data -= lr * v
    state.step_count += 1


class SGD:
    """Thin stateful wrapper used by the trainer."""

    def __init__(self, params: List[Tensor], lr: float, momentum: float = 0.98, total_steps: int = 1):
        self.params = params
        self.state = OptimState(lr, momentum, total_steps)

    def step(self, lr: float) -> None:
        self.state.learning_rate = lr
        sgd_momentum_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
