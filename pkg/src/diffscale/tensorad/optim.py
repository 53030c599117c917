from __future__ import annotations

import numpy as np


class Adam:
    """Adaptive moment estimation with optional global gradient-norm clipping."""

    def __init__(self, params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8, clip_norm: float | None = 1.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                                 for p in self.params if p.grad is not None)))

    def step(self) -> float:
        norm = self.grad_norm()
        factor = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            factor = self.clip_norm / (norm + 1e-12)
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad * factor
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
        return norm
