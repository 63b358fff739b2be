"""Minimal adaptive-moment optimizer shared by the trainer and experiments."""

from __future__ import annotations

import numpy as np


class Adam:
    """Per-group Adam with bias correction.

    params is a dict of arrays updated in place; lr may be a scalar or a
    per-group dict. Groups appear lazily on first step.
    """

    def __init__(self, lr, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def group_lr(self, name: str) -> float:
        if isinstance(self.lr, dict):
            return self.lr[name]
        return float(self.lr)

    def step(self, params: dict, grads: dict, lr_scale: dict | None = None):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            lr = self.group_lr(name)
            if lr_scale and name in lr_scale:
                lr *= lr_scale[name]
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
