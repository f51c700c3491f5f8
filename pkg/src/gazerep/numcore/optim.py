"""SGD with classic momentum and decoupled-from-bias weight decay."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Param


class SGD:
    """v <- momentum * v + grad + weight_decay * value;  value <- value - lr * v.

    Weight decay only touches params with ``decay=True``. Params with
    ``requires_grad=False`` are frozen and never updated.
    """

    def __init__(self, params: Iterable[Param], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("SGD: duplicate parameter names")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        sgd_step(self.params, self.lr if lr is None else lr, self.momentum, self.weight_decay, self.velocity)


def sgd_step(params, lr: float, momentum: float, weight_decay: float, state: dict) -> None:
    if lr < 0:
        raise ValueError(f"sgd_step: learning rate must be nonnegative, got {lr}")
    for p in params:
        if not p.requires_grad:
            continue
        v = state[p.name]
        if v.shape != p.data.shape:
            raise ValueError(f"sgd_step: velocity shape {v.shape} != param {p.name} shape {p.shape}")
        v *= momentum
        v += p.grad
        if weight_decay and p.decay:
            v += weight_decay * p.data
        if lr:
            p.data -= np.asarray(lr, dtype=p.data.dtype) * v
