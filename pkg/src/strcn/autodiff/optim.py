"""Stochastic gradient descent with momentum and weight decay."""

from __future__ import annotations

from typing import Dict, Iterable, List, Optional

import numpy as np

from .tensor import Tensor


def sgd_step(
    params: List[np.ndarray],
    grads: List[np.ndarray],
    state: List[Optional[np.ndarray]],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
) -> None:
    """Update ``params`` in place.

    ``v <- momentum * v + grad + weight_decay * param`` then
    ``param <- param - lr * v``. ``state`` holds one velocity per parameter
    (``None`` before the first step) and is updated in place.
    """
    if not (len(params) == len(grads) == len(state)):
        raise ValueError("params, grads and state must have equal length")
    for k, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch for parameter {k}: {p.shape} vs {g.shape}")
        v = state[k]
        if v is None:
            v = np.zeros_like(p)
        v = momentum * v + g + weight_decay * p
        state[k] = v
        p -= lr * v


class SGD:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, momentum: float = 0.9,
                 weight_decay: float = 5e-4):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state: List[Optional[np.ndarray]] = [None] * len(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        sgd_step([p.data for p in self.params], grads, self.state, self.lr,
                 self.momentum, self.weight_decay)

    def state_dict(self) -> Dict[str, float]:
        return {"lr": self.lr, "momentum": self.momentum, "weight_decay": self.weight_decay}
