"""Reverse-time integrators for the variance-exploding process.

All solvers integrate on an equidistant grid from ``t = 1`` down to
``t_min`` and take a ``score_fn(x, t)`` returning an array shaped like ``x``.
With ``dt < 0`` the updates are

* Euler-Maruyama:  ``x += -g^2 s dt + g sqrt(|dt|) z``
* probability flow: ``x += -0.5 g^2 s dt``
* Heun: trapezoidal corrector on the probability-flow field.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError
from .sde import VarianceSchedule, diffusion_g, prior_sample

METHODS = ("euler_maruyama", "prob_flow_euler", "heun2")
ALIASES = {"em": "euler_maruyama", "pf": "prob_flow_euler", "heun": "heun2"}

_MASK64 = (1 << 64) - 1


def mix64(seed: int, index: int) -> int:
    """SplitMix64 finalizer applied to ``seed + golden * (index + 1)``."""
    z = (seed + 0x9E3779B97F4A7C15 * (index + 1)) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class SolverSpec:
    method: str = "euler_maruyama"
    steps: int = 100
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", ALIASES.get(self.method, self.method))
        if self.method not in METHODS:
            raise ConfigError(f"unknown solver {self.method!r}; choose from em, pf, heun")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError(f"solver steps must be a positive integer, got {self.steps}")

    def member_seed(self, i: int) -> int:
        return mix64(self.seed, i)


def time_grid(sched: VarianceSchedule, steps: int) -> np.ndarray:
    return np.linspace(1.0, sched.t_min, steps + 1)


class CountingScore:
    """Wraps a score function and counts its evaluations."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, x, t):
        self.calls += 1
        return self.fn(x, t)


class MemberStreams:
    """Stacks independent per-member generators along the leading axis."""

    def __init__(self, seeds):
        self.rngs = [np.random.default_rng(s) for s in seeds]

    def standard_normal(self, shape):
        if shape[0] != len(self.rngs):
            raise ValueError(f"leading axis {shape[0]} != {len(self.rngs)} member streams")
        return np.stack([r.standard_normal(shape[1:]) for r in self.rngs])


def _start(sched, spec, shape, rng, x_init):
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    if x_init is None:
        x = prior_sample(sched, shape, rng)
    else:
        x = np.array(x_init, dtype=np.float64).reshape(shape)
    return x, rng


def euler_maruyama_sample(score_fn, sched: VarianceSchedule, spec: SolverSpec, shape,
                          rng=None, x_init=None, noise=True) -> np.ndarray:
    """Integrate the reverse SDE; ``noise=False`` drops the Wiener increments."""
    x, rng = _start(sched, spec, shape, rng, x_init)
    ts = time_grid(sched, spec.steps)
    for t, t_next in zip(ts[:-1], ts[1:]):
        dt = t_next - t
        g = diffusion_g(sched, t)
        x = x - g * g * score_fn(x, t) * dt
        if noise:
            x = x + g * np.sqrt(-dt) * rng.standard_normal(shape)
    return x


def prob_flow_euler_sample(score_fn, sched: VarianceSchedule, spec: SolverSpec, shape,
                           rng=None, x_init=None) -> np.ndarray:
    x, _ = _start(sched, spec, shape, rng, x_init)
    ts = time_grid(sched, spec.steps)
    for t, t_next in zip(ts[:-1], ts[1:]):
        g = diffusion_g(sched, t)
        x = x - 0.5 * g * g * score_fn(x, t) * (t_next - t)
    return x


def heun2_sample(score_fn, sched: VarianceSchedule, spec: SolverSpec, shape,
                 rng=None, x_init=None) -> np.ndarray:
    """Probability-flow ODE with a Heun corrector; the final step is plain Euler."""
    x, _ = _start(sched, spec, shape, rng, x_init)
    ts = time_grid(sched, spec.steps)

    def slope(y, t):
        g = diffusion_g(sched, t)
        return -0.5 * g * g * score_fn(y, t)

    last = len(ts) - 2
    for i, (t, t_next) in enumerate(zip(ts[:-1], ts[1:])):
        dt = t_next - t
        d = slope(x, t)
        pred = x + d * dt
        if i == last:
            x = pred
        else:
            x = x + 0.5 * (d + slope(pred, t_next)) * dt
    return x


SOLVERS = {
    "euler_maruyama": euler_maruyama_sample,
    "prob_flow_euler": prob_flow_euler_sample,
    "heun2": heun2_sample,
}


def solve(score_fn, sched, spec: SolverSpec, shape, rng=None, x_init=None) -> np.ndarray:
    return SOLVERS[spec.method](score_fn, sched, spec, shape, rng=rng, x_init=x_init)


def expected_nfe(spec: SolverSpec) -> int:
    if spec.method == "heun2":
        return 2 * spec.steps - 1
    return spec.steps


@dataclass
class EnsembleForecast:
    members: np.ndarray  # (K, S, S), physical units
    condition: object

    @property
    def K(self) -> int:
        return self.members.shape[0]

    def mean(self) -> np.ndarray:
        return np.sort(self.members, axis=0).mean(axis=0)


def _check_finite(x, where):
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {where}")


def sample_member(net, cond, sched, spec: SolverSpec, i: int, w: float = 0.0) -> np.ndarray:
    """One ensemble member (standardized space) from the ``i``-th derived noise stream."""
    from .scorenet import guided_score

    s = net.config.canvas
    rng = np.random.default_rng(spec.member_seed(i))
    out = solve(lambda x, t: guided_score(net, x, t, cond, w), sched, spec, (s, s), rng=rng)
    _check_finite(out, f"sampler member {i}")
    return out


def sample_ensemble(net, cond, sched, spec: SolverSpec, K: int, w: float = 0.0,
                    mode: str = "batched", workers: int = 1) -> EnsembleForecast:
    """``K`` independent reverse-process runs for one condition.

    ``mode`` is ``"batched"`` (all members integrated as one stacked state),
    ``"sequential"`` or ``"parallel"`` (one run per member, optionally on a
    thread pool). Every mode draws member ``i``'s noise from the same derived
    stream; the per-member modes agree bit for bit.
    """
    from .scorenet import guided_score

    if K < 1:
        raise ConfigError(f"ensemble size must be >= 1, got {K}")
    cond.validate()
    s = net.config.canvas
    if mode == "batched":
        streams = MemberStreams([spec.member_seed(i) for i in range(K)])
        std = solve(lambda x, t: guided_score(net, x, t, cond, w), sched, spec, (K, s, s), rng=streams)
        _check_finite(std, "sampler")
    elif mode == "sequential":
        std = np.stack([sample_member(net, cond, sched, spec, i, w) for i in range(K)])
    elif mode == "parallel":
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            std = np.stack(list(pool.map(lambda i: sample_member(net, cond, sched, spec, i, w), range(K))))
    else:
        raise ConfigError(f"unknown ensemble mode {mode!r}")
    return EnsembleForecast(net.destandardize_target(std), cond)


def sample_cases(net, conds, sched, spec: SolverSpec, K: int, seeds, w: float = 0.0) -> np.ndarray:
    """Ensembles for several conditions integrated together, ``(n_cases, K, S, S)``.

    Case ``c`` member ``i`` uses stream ``mix64(seeds[c], i)``.
    """
    s = net.config.canvas
    n = len(conds)
    flat_conds = [c for c in conds for _ in range(K)]
    for c in conds:
        c.validate()
    streams = MemberStreams([mix64(seed, i) for seed in seeds for i in range(K)])

    def score_fn(x, t):
        if w == 0:
            return net.score(x, t, flat_conds)
        cond_s = net.score(x, t, flat_conds)
        null_s = net.score(x, t, [c.as_null() for c in flat_conds])
        return (1 + w) * cond_s - w * null_s

    std = solve(score_fn, sched, spec, (n * K, s, s), rng=streams)
    _check_finite(std, "sampler")
    return net.destandardize_target(std).reshape(n, K, s, s)
