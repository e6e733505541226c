"""SGD with classic momentum and in-gradient weight decay, plus the polynomial LR schedule."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["SgdMomentum", "sgd_step", "poly_lr"]

DEFAULT_MOMENTUM = 0.9
DEFAULT_WEIGHT_DECAY = 1e-4


def sgd_step(
    params: list[Tensor],
    velocities: list[np.ndarray],
    lr: float,
    momentum: float = DEFAULT_MOMENTUM,
    weight_decay: float = DEFAULT_WEIGHT_DECAY,
) -> None:
    """v <- momentum*v + (g + wd*p); p <- p - lr*v  (in place)."""
    for p, v in zip(params, velocities):
        g = p.grad + weight_decay * p.data
        v *= momentum
        v += g
        p.data -= lr * v


class SgdMomentum:
    """One momentum buffer per parameter, shape-matched."""

    def __init__(
        self,
        params: list[Tensor],
        lr: float,
        momentum: float = DEFAULT_MOMENTUM,
        weight_decay: float = DEFAULT_WEIGHT_DECAY,
    ):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        sgd_step(self.params, self.velocities, self.lr, self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def poly_lr(lr_init: float, epoch: int, total_epochs: int, power: float = 0.9) -> float:
    """Polynomial annealing: lr_init * (1 - epoch/total_epochs)**power."""
    return lr_init * (1.0 - epoch / total_epochs) ** power
