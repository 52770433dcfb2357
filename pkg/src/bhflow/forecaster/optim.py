"""AdamW with a cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    """``base_lr * 0.5 * (1 + cos(pi * epoch / total_epochs))``."""
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


class AdamW:
    def __init__(self, params: dict, weight_decay: float = 1e-4):
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params: dict, grads: dict, lr: float):
        """Update ``params`` in place. Parameters are visited in sorted name
        order so the arithmetic sequence never depends on dict history."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - BETA1**t
        c2 = 1.0 - BETA2**t
        for name in sorted(params):
            p, g = params[name], grads[name]
            m, v = self.m[name], self.v[name]
            m *= BETA1
            m += (1.0 - BETA1) * g
            v *= BETA2
            v += (1.0 - BETA2) * (g * g)
            if lr == 0.0:
                continue
            # decoupled weight decay, then the moment step
            p *= 1.0 - lr * self.weight_decay
            p -= (lr / c1) * m / (np.sqrt(v / c2) + EPS)
