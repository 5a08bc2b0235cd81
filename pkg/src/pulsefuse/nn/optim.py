"""Adam with a one-cycle learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import MissingGrad
from .params import ParamStore


@dataclass(frozen=True)
class OneCycle:
    """Linear warm-up from lr/div to lr over ``pct_start`` of the steps, then cosine decay to lr/final_div."""

    lr_max: float
    total_steps: int
    pct_start: float = 0.3
    div: float = 25.0
    final_div: float = 25.0

    def __call__(self, step: int) -> float:
        lo, hi = self.lr_max / self.div, self.lr_max
        end = self.lr_max / self.final_div
        last = max(self.total_steps - 1, 1)
        warm = self.pct_start * last
        s = min(max(step, 0), last)
        if s <= warm:
            return lo + (hi - lo) * (s / warm if warm > 0 else 1.0)
        frac = (s - warm) / (last - warm)
        return end + (hi - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


class Adam:
    def __init__(self, store: ParamStore, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in store.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in store.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        for k, p in self.store.items():
            if p.grad is None:
                raise MissingGrad(f"parameter {k} has no gradient")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.store.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
