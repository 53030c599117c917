"""Conditional noise-prediction UNet and the denoising score-matching objective.

The network predicts the unit noise ``eps`` that was added to a clean canvas;
the score follows as ``-eps_hat / sigma(t)``. The UNet output ``F`` enters
through a denoiser ``D = c_skip x + c_out F`` (unit data scale), so
``eps_hat = (x - D) / sigma = x sigma / (1 + sigma^2) - c_in F``. Errors in
``F`` then stay bounded in the implied clean canvas at large noise levels,
where a raw noise head would need precision of order ``1 / sigma``. Conditioning enters in two
ways: condition fields (coarse forecast, static priors, dynamic variables) are
resized to the canvas and stacked next to the noisy state, while the scaling
factor and lead time are embedded and added to every residual block together
with the diffusion-time embedding. A learned null embedding plus zeroed
condition channels form the unconditional branch used for guidance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorad as ad
from .errors import ConfigError, DimensionError, DomainError, UsageError
from .grid import bilinear_resize
from .sde import VarianceSchedule, sigma

STATIC_CHANNELS = ("orography", "land_sea")
DYNAMIC_CHANNELS = ("t2m", "mslp", "u300", "u925", "v300", "v925", "z500")

CONFIGURATIONS = {
    "lr-ws+sf": ("lowres_ws",) + STATIC_CHANNELS,
    "sf+lr-df": STATIC_CHANNELS + DYNAMIC_CHANNELS,
    "lr-ws+sf+lr-df": ("lowres_ws",) + STATIC_CHANNELS + DYNAMIC_CHANNELS,
}

LEAD_MIN, LEAD_MAX = 1.0, 46.0
ALPHA_SCALE = 8.0
N_FOURIER = 8


@dataclass
class Condition:
    alpha: float
    lead: float
    lowres_ws: np.ndarray | None = None
    priors: dict = field(default_factory=dict)
    is_null: bool = False

    def validate(self):
        if self.is_null:
            return
        if not (self.alpha >= 1) or not math.isfinite(self.alpha):
            raise DomainError(f"scaling factor must be >= 1, got {self.alpha}")
        if not (LEAD_MIN <= self.lead <= LEAD_MAX):
            raise DomainError(f"lead time must lie in [1, 46] days, got {self.lead}")

    def as_null(self) -> "Condition":
        return Condition(self.alpha, self.lead, self.lowres_ws, self.priors, is_null=True)

    def channel(self, name: str):
        if name == "lowres_ws":
            return self.lowres_ws
        return self.priors.get(name)


def fourier_features(values, n: int = N_FOURIER) -> np.ndarray:
    """``[cos(pi 2^k v), sin(pi 2^k v)]`` for ``k < n``; rows follow ``values``."""
    v = np.atleast_1d(np.asarray(values, dtype=np.float64))
    freqs = np.pi * 2.0 ** np.arange(n)
    ang = v[:, None] * freqs[None, :]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1)


@dataclass(frozen=True)
class ModelConfig:
    config_id: str = "lr-ws+sf"
    channels: tuple = (32, 64, 128)
    emb_dim: int = 64
    canvas: int = 48
    base: int = 12

    def __post_init__(self):
        if self.config_id not in CONFIGURATIONS:
            raise ConfigError(f"unknown configuration {self.config_id!r}; expected one of {sorted(CONFIGURATIONS)}")
        if len(self.channels) != 3:
            raise ConfigError("the UNet has exactly three levels")
        if self.canvas % 4:
            raise ConfigError(f"canvas {self.canvas} must be divisible by 4 for two pooling stages")

    @property
    def cond_names(self) -> tuple:
        return CONFIGURATIONS[self.config_id]


def _groups(c: int) -> int:
    return math.gcd(c, 8)


class ScoreNetwork:
    """Parameters, input standardization and forward pass of the conditional UNet."""

    def __init__(self, config: ModelConfig, schedule: VarianceSchedule | None = None,
                 seed: int = 0, dtype=np.float32, norm: dict | None = None):
        self.config = config
        self.schedule = schedule or VarianceSchedule()
        self.dtype = np.dtype(dtype)
        # per-channel (mean, std); "target" is the high-resolution variable
        self.norm = {"target": (0.0, 1.0)}
        self.norm.update({name: (0.0, 1.0) for name in config.cond_names})
        if norm:
            self.norm.update(norm)
        self.params: dict[str, ad.Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    # parameters -----------------------------------------------------------------
    def _add(self, name, shape, rng, fan_in=None, zero=False, value=None):
        if value is not None:
            data = np.full(shape, value)
        elif zero or fan_in is None:
            data = np.zeros(shape)
        else:
            data = rng.standard_normal(shape) * math.sqrt(1.0 / fan_in)
        self.params[name] = ad.Tensor(data.astype(self.dtype), requires_grad=True, name=name)

    def _conv(self, name, cin, cout, k, rng, zero=False):
        self._add(f"{name}.w", (cout, cin, k, k), rng, fan_in=cin * k * k, zero=zero)
        self._add(f"{name}.b", (cout,), rng)

    def _dense(self, name, din, dout, rng, bias=True):
        self._add(f"{name}.w", (din, dout), rng, fan_in=din)
        if bias:
            self._add(f"{name}.b", (dout,), rng)

    def _norm(self, name, c):
        self._add(f"{name}.gamma", (c,), None, value=1.0)
        self._add(f"{name}.beta", (c,), None)

    def _init_resblock(self, name, cin, cout, rng):
        e = self.config.emb_dim
        self._norm(f"{name}.n1", cin)
        self._conv(f"{name}.c1", cin, cout, 3, rng)
        self._dense(f"{name}.emb", e, cout, rng)
        self._norm(f"{name}.n2", cout)
        self._conv(f"{name}.c2", cout, cout, 3, rng, zero=True)
        if cin != cout:
            self._conv(f"{name}.skip", cin, cout, 1, rng)

    def _init_params(self, rng):
        c0, c1, c2 = self.config.channels
        e = self.config.emb_dim
        nf = 2 * N_FOURIER
        self._dense("temb1", nf, e, rng)
        self._dense("temb2", e, e, rng)
        self._dense("cemb1", 2 * nf, e, rng)
        self._dense("cemb2", e, e, rng)
        self._add("null_emb", (e,), rng, fan_in=e)
        self._conv("in", 1 + len(self.config.cond_names), c0, 3, rng)
        self._init_resblock("down0", c0, c0, rng)
        self._init_resblock("down1", c0, c1, rng)
        self._init_resblock("mid0", c1, c2, rng)
        self._norm("attn.n", c2)
        for p in ("q", "k", "v"):
            self._dense(f"attn.{p}", c2, c2, rng, bias=False)
        self._add("attn.o.w", (c2, c2), rng)
        self._init_resblock("mid1", c2, c2, rng)
        self._init_resblock("up1", c2 + c1, c1, rng)
        self._init_resblock("up0", c1 + c0, c0, rng)
        self._norm("out.n", c0)
        self._conv("out", c0, 1, 3, rng, zero=True)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_dict(self) -> dict:
        return {k: p.data for k, p in self.params.items()}

    def load_state_dict(self, state: dict):
        missing = set(self.params) - set(state)
        if missing:
            raise DimensionError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise DimensionError(f"parameter {k}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.astype(self.dtype).copy()

    def astype(self, dtype) -> "ScoreNetwork":
        other = ScoreNetwork(self.config, self.schedule, dtype=dtype, norm=dict(self.norm))
        other.load_state_dict(self.state_dict())
        return other

    # inputs -----------------------------------------------------------------
    def standardize_target(self, x):
        mu, sd = self.norm["target"]
        return (np.asarray(x, dtype=np.float64) - mu) / sd

    def destandardize_target(self, y):
        mu, sd = self.norm["target"]
        return np.asarray(y, dtype=np.float64) * sd + mu

    def condition_channels(self, cond: Condition) -> np.ndarray:
        """Standardized condition stack ``(C, S, S)``; all zeros for the null token."""
        s = self.config.canvas
        names = self.config.cond_names
        out = np.zeros((len(names), s, s), dtype=self.dtype)
        if cond.is_null:
            return out
        for i, name in enumerate(names):
            f = cond.channel(name)
            if f is None:
                raise DimensionError(f"configuration {self.config.config_id} needs channel {name!r}")
            f = np.asarray(f, dtype=np.float64)
            if f.shape != (s, s):
                f = bilinear_resize(f, s, s)
            mu, sd = self.norm[name]
            out[i] = (f - mu) / sd
        return out

    def embed_condition(self, alpha, lead, is_null) -> ad.Tensor:
        """Embedding of scaling factor and lead time, ``(N, emb_dim)``; rows flagged null get the null token."""
        alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
        lead = np.atleast_1d(np.asarray(lead, dtype=np.float64))
        null = np.atleast_1d(np.asarray(is_null, dtype=bool))
        live = ~null
        if np.any(alpha[live] < 1) or np.any(~np.isfinite(alpha[live])):
            raise DomainError(f"scaling factor must be >= 1, got {alpha[live]}")
        if np.any(lead[live] < LEAD_MIN) or np.any(lead[live] > LEAD_MAX):
            raise DomainError(f"lead time must lie in [1, 46] days, got {lead[live]}")
        a = np.where(null, 0.0, alpha / ALPHA_SCALE)
        l = np.where(null, 0.0, lead / LEAD_MAX)
        feats = np.concatenate([fourier_features(a), fourier_features(l)], axis=1).astype(self.dtype)
        p = self.params
        h = ad.silu(ad.dense(feats, p["cemb1.w"], p["cemb1.b"]))
        h = ad.dense(h, p["cemb2.w"], p["cemb2.b"])
        return ad.mix_rows(h, p["null_emb"], null)

    def _time_embedding(self, t) -> ad.Tensor:
        feats = fourier_features(np.asarray(t, dtype=np.float64)).astype(self.dtype)
        p = self.params
        h = ad.silu(ad.dense(feats, p["temb1.w"], p["temb1.b"]))
        return ad.dense(h, p["temb2.w"], p["temb2.b"])

    # forward -----------------------------------------------------------------
    def _resblock(self, name, x, emb):
        p = self.params
        h = ad.silu(ad.group_norm(x, _groups(x.shape[0]), p[f"{name}.n1.gamma"], p[f"{name}.n1.beta"]))
        h = ad.conv2d(h, p[f"{name}.c1.w"], p[f"{name}.c1.b"])
        h = ad.add_channel(h, ad.dense(emb, p[f"{name}.emb.w"], p[f"{name}.emb.b"]))
        h = ad.silu(ad.group_norm(h, _groups(h.shape[0]), p[f"{name}.n2.gamma"], p[f"{name}.n2.beta"]))
        h = ad.conv2d(h, p[f"{name}.c2.w"], p[f"{name}.c2.b"])
        skip = x
        if f"{name}.skip.w" in p:
            skip = ad.conv2d(x, p[f"{name}.skip.w"], p[f"{name}.skip.b"])
        return ad.add(skip, h)

    def _attention(self, x):
        p = self.params
        h = ad.group_norm(x, _groups(x.shape[0]), p["attn.n.gamma"], p["attn.n.beta"])
        h = ad.self_attention(h, p["attn.q.w"], p["attn.k.w"], p["attn.v.w"], p["attn.o.w"])
        return ad.add(x, h)

    def noise_prediction(self, x_t, t, conds) -> ad.Tensor:
        """Predicted unit noise ``(1, N, S, S)`` for standardized noisy canvases ``x_t``.

        ``x_t`` is ``(N, S, S)`` (or a single ``S x S`` canvas), ``t`` a scalar
        or one time per sample, ``conds`` one :class:`Condition` per sample.
        """
        x = np.asarray(x_t, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if isinstance(conds, Condition):
            conds = [conds] * x.shape[0]
        n, s = x.shape[0], self.config.canvas
        if x.shape[1:] != (s, s) or len(conds) != n:
            raise DimensionError(f"expected {n} conditions and canvases of {s}x{s}, got {x.shape}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        sig = sigma(self.schedule, t)
        c_in = 1.0 / np.sqrt(1.0 + sig**2)
        cond_stack = np.stack([self.condition_channels(c) for c in conds], axis=1)
        scaled = (x * c_in[:, None, None]).astype(self.dtype)[None]
        inp = np.concatenate([scaled, cond_stack], axis=0)

        emb = ad.add(self._time_embedding(t), self.embed_condition(
            [c.alpha for c in conds], [c.lead for c in conds], [c.is_null for c in conds]))
        emb = ad.silu(emb)
        p = self.params
        h = ad.conv2d(inp, p["in.w"], p["in.b"])
        h0 = self._resblock("down0", h, emb)
        h1 = self._resblock("down1", ad.avg_pool2(h0), emb)
        h = self._resblock("mid0", ad.avg_pool2(h1), emb)
        h = self._attention(h)
        h = self._resblock("mid1", h, emb)
        h = self._resblock("up1", ad.concat([ad.upsample2(h), h1]), emb)
        h = self._resblock("up0", ad.concat([ad.upsample2(h), h0]), emb)
        h = ad.silu(ad.group_norm(h, _groups(h.shape[0]), p["out.n.gamma"], p["out.n.beta"]))
        f = ad.conv2d(h, p["out.w"], p["out.b"])
        skip = (x * (sig / (1.0 + sig**2))[:, None, None]).astype(self.dtype)[None]
        gain = np.broadcast_to(c_in[:, None, None], x.shape).astype(self.dtype)[None]
        return ad.sub(ad.Tensor(skip), ad.mul(f, ad.Tensor(gain)))

    def score(self, x_t, t, conds) -> np.ndarray:
        """``-eps_hat / sigma(t)`` with the same leading shape as ``x_t``."""
        x = np.asarray(x_t)
        eps = self.noise_prediction(x, t, conds).data[0].astype(np.float64)
        n = eps.shape[0]
        sig = np.broadcast_to(np.asarray(sigma(self.schedule, t), dtype=np.float64), (n,))
        out = -eps / sig[:, None, None]
        return out.reshape(x.shape)


def score_forward(net: ScoreNetwork, x_t, t, cond: Condition) -> np.ndarray:
    cond.validate()
    return net.score(x_t, t, cond)


def guided_score(net: ScoreNetwork, x_t, t, cond: Condition, w: float = 0.0) -> np.ndarray:
    """Classifier-free guidance ``(1 + w) s(cond) - w s(null)``."""
    conditional = net.score(x_t, t, cond)
    if w == 0:
        return conditional
    unconditional = net.score(x_t, t, cond.as_null())
    if w == -1:
        return unconditional
    return (1 + w) * conditional - w * unconditional


@dataclass
class TrainBatch:
    targets: np.ndarray  # (B, S, S), standardized
    conds: list

    def __post_init__(self):
        if len(self.conds) == 0:
            raise UsageError("empty training batch")
        if self.targets.ndim != 3 or self.targets.shape[0] != len(self.conds):
            raise DimensionError("one S x S target per condition is required")


@dataclass
class LossResult:
    loss: float
    grads: dict
    n_null: int


def dsm_loss(net: ScoreNetwork, batch: TrainBatch, sched: VarianceSchedule,
             rng: np.random.Generator, p_uncond: float = 0.1, backward: bool = True) -> LossResult:
    """Denoising score matching in noise-prediction form.

    Draws one diffusion time and noise field per item, drops conditions with
    probability ``p_uncond``, and returns the mean squared noise error with
    gradients for every network parameter.
    """
    if not (0 <= p_uncond < 1):
        raise DomainError(f"p_uncond must lie in [0, 1), got {p_uncond}")
    n = len(batch.conds)
    t = rng.uniform(sched.t_min, 1.0, size=n)
    eps = rng.standard_normal(batch.targets.shape)
    drop = rng.uniform(size=n) < p_uncond
    conds = [c.as_null() if d else c for c, d in zip(batch.conds, drop)]
    sig = sigma(sched, t)
    x_t = batch.targets + sig[:, None, None] * eps
    pred = net.noise_prediction(x_t, t, conds)
    target = ad.Tensor(eps[None].astype(net.dtype))
    loss = ad.mean(ad.square(ad.sub(pred, target)))
    grads = {}
    if backward:
        for p in net.params.values():
            p.grad = None
        ad.backprop(loss)
        grads = {k: p.grad for k, p in net.params.items() if p.grad is not None}
    return LossResult(float(loss.data), grads, int(drop.sum()))
