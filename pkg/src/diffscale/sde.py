"""Variance-exploding forward process.

The process is driftless (``f = 0``, ``s(t) = 1``) and entirely described by
the noise scale ``sigma(t) = sigma_min * (sigma_max / sigma_min) ** t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, DomainError

SIGMA_MIN = 0.01
SIGMA_MAX = 50.0
T_MIN = 1e-3


@dataclass(frozen=True)
class VarianceSchedule:
    sigma_min: float = SIGMA_MIN
    sigma_max: float = SIGMA_MAX
    t_min: float = T_MIN

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise ConfigError(
                f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}"
            )
        if not (0 < self.t_min < 1):
            raise ConfigError(f"t_min must lie in (0, 1), got {self.t_min}")

    @property
    def log_ratio(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)

    def sigma(self, t):
        return sigma(self, t)

    def g(self, t):
        return diffusion_g(self, t)


def _check_time(t):
    arr = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
        raise DomainError(f"diffusion time must lie in [0, 1], got {t}")
    return arr


def sigma(sched: VarianceSchedule, t):
    arr = _check_time(t)
    out = sched.sigma_min * np.exp(sched.log_ratio * arr)
    return float(out) if arr.ndim == 0 else out


def diffusion_g(sched: VarianceSchedule, t):
    """``g(t) = sqrt(2 sigma sigma')``, which for this schedule is ``sigma(t) sqrt(2 ln(max/min))``."""
    return sigma(sched, t) * math.sqrt(2.0 * sched.log_ratio)


def perturb(sched: VarianceSchedule, x0, t, z):
    """Draw from the transition kernel ``N(x0, sigma(t)^2 I)`` given unit noise ``z``."""
    x0 = np.asarray(x0)
    z = np.asarray(z)
    if x0.shape != z.shape:
        raise DimensionError(f"x0 {x0.shape} and z {z.shape} differ in shape")
    return x0 + sigma(sched, t) * z


def prior_sample(sched: VarianceSchedule, shape, rng: np.random.Generator) -> np.ndarray:
    return sched.sigma_max * rng.standard_normal(shape)
