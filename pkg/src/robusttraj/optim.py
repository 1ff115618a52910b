"""Adam with per-parameter state, operating on name -> ndarray dicts."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict) -> None:
        """In-place update of every param that has a gradient entry."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            if name not in params:
                raise KeyError(f"optimizer: gradient for unknown param '{name}'")
            if not np.all(np.isfinite(g)):
                raise RuntimeError(f"optimizer: non-finite gradient for '{name}'")
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self.m[name] = m
            self.v[name] = v
            params[name] = params[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
