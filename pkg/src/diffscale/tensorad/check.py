from __future__ import annotations

import numpy as np

from .tensor import backprop


def finite_diff_check(f, params, h: float = 1e-3, max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between reverse-mode and five-point central-difference gradients.

    ``f`` is a zero-argument callable returning a scalar Tensor built from
    ``params``. With ``max_coords`` only that many randomly chosen entries per
    parameter are probed.
    """
    for p in params:
        p.grad = None
    backprop(f())
    analytic = [np.zeros(p.shape) if p.grad is None else np.array(p.grad, dtype=np.float64) for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g_ad in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            vals = []
            for step in (2 * h, h, -h, -2 * h):
                flat[i] = orig + step
                vals.append(float(f().data))
            flat[i] = orig
            # fourth-order stencil; truncation error O(h^4)
            g_fd = (8 * (vals[1] - vals[2]) - (vals[0] - vals[3])) / (12 * h)
            a = g_ad.reshape(-1)[i]
            err = abs(a - g_fd) / max(abs(a), abs(g_fd), 1e-8)
            worst = max(worst, err)
    return worst
