"""Plain SGD with L2 weight decay and poly learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractError


@dataclass(frozen=True)
class SgdState:
    lr_init: float
    weight_decay: float
    total_iters: int
    power: float = 0.9

    def __post_init__(self):
        if self.total_iters < 1:
            raise ValueError("total_iters must be positive")


def poly_lr(t: int, state: SgdState) -> float:
    """``lr_init * (1 - t/T) ** power``; exactly ``lr_init`` at 0 and 0 at ``T``."""
    if t < 0 or t > state.total_iters:
        raise ValueError(f"iteration {t} outside [0, {state.total_iters}]")
    return state.lr_init * (1.0 - t / state.total_iters) ** state.power


def sgd_step(params, grads, state: SgdState, t: int):
    """In place: ``theta -= lr(t) * (grad + weight_decay * theta)`` for every
    parameter in ``params``. Returns ``params``."""
    if t >= state.total_iters:
        raise ValueError(f"iteration {t} outside [0, {state.total_iters})")
    missing = [p.name for p in params if p.name not in grads]
    if missing:
        raise ContractError(f"missing gradients for {missing}")
    lr = np.float32(poly_lr(t, state))
    wd = np.float32(state.weight_decay)
    for p in params:
        g = grads[p.name]
        if g.shape != p.data.shape:
            raise ContractError(f"gradient for {p.name} has shape {g.shape}, expected {p.data.shape}")
        p.data -= lr * (g + wd * p.data)
    return params
