"""Training, sampling and evaluation glue between the dataset and the score network."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import tensorad as ad
from .errors import NumericalError
from .grid import enumerate_factors, pixelate
from .sampler import MemberStreams, SolverSpec, mix64, solve
from .scorenet import DYNAMIC_CHANNELS, Condition, ModelConfig, ScoreNetwork, TrainBatch, dsm_loss
from .sde import VarianceSchedule
from .synthdata import CaseGroup, Dataset
from .verify import BINS, EvalCase, MetricReport, assign_bin, evaluate_run

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    steps: int = 2000
    lr: float = 2e-4
    p_uncond: float = 0.1
    clip: float = 1.0
    ema: float = 0.999  # weight-average decay; 0 disables
    lr_decay: str = "none"  # none | cosine
    val_every: int = 250
    val_batch: int = 32
    val_mae_cases: int = 2  # per bin; 0 disables the sampled check
    val_mae_members: int = 2
    val_mae_steps: int = 20


# ------------------------------------------------------------------ conditions
def group_condition(ds: Dataset, g: CaseGroup, member: int, alpha) -> Condition:
    priors = dict(ds.statics)
    if g.dynamic is not None:
        priors.update({name: g.dynamic[member, i] for i, name in enumerate(DYNAMIC_CHANNELS)})
    return Condition(float(alpha), float(g.lead), g.forecasts[member], priors)


def normalization_stats(ds: Dataset, config: ModelConfig) -> dict:
    groups = ds.groups["train"]
    truths = np.stack([g.truth for g in groups]).astype(np.float64)
    stats = {"target": (float(truths.mean()), float(truths.std()))}
    for name in config.cond_names:
        if name == "lowres_ws":
            arr = np.stack([g.forecasts for g in groups]).astype(np.float64)
        elif name in ds.statics:
            arr = np.asarray(ds.statics[name], dtype=np.float64)
        else:
            i = DYNAMIC_CHANNELS.index(name)
            arr = np.stack([g.dynamic[:, i] for g in groups]).astype(np.float64)
        sd = float(arr.std())
        stats[name] = (float(arr.mean()), sd if sd > 0 else 1.0)
    return stats


def draw_batch(ds: Dataset, net: ScoreNetwork, groups, rng, batch_size: int) -> TrainBatch:
    """Random (case, member, resolution fraction) triples with pixelated targets."""
    fs = enumerate_factors(net.config.base, net.config.canvas)
    targets, conds = [], []
    for _ in range(batch_size):
        g = groups[rng.integers(len(groups))]
        m = int(rng.integers(g.forecasts.shape[0]))
        k = int(rng.integers(len(fs.sizes)))
        targets.append(net.standardize_target(pixelate(g.truth, fs.sizes[k])))
        conds.append(group_condition(ds, g, m, fs.factors[k]))
    return TrainBatch(np.stack(targets), conds)


# ------------------------------------------------------------------ checkpoints
def checkpoint_metadata(net: ScoreNetwork, p_uncond: float, extra: dict | None = None) -> dict:
    meta = {
        "config_id": net.config.config_id,
        "channels": ",".join(str(c) for c in net.config.channels),
        "emb_dim": net.config.emb_dim,
        "canvas": net.config.canvas,
        "base": net.config.base,
        "sigma_min": repr(net.schedule.sigma_min),
        "sigma_max": repr(net.schedule.sigma_max),
        "t_min": repr(net.schedule.t_min),
        "p_uncond": repr(p_uncond),
    }
    for name, (mu, sd) in net.norm.items():
        meta[f"norm.{name}"] = f"{mu!r},{sd!r}"
    meta.update(extra or {})
    return meta


def save_network(net: ScoreNetwork, path, p_uncond: float, extra: dict | None = None):
    ad.save_checkpoint(path, net.state_dict(), checkpoint_metadata(net, p_uncond, extra))


def load_network(path) -> tuple[ScoreNetwork, dict]:
    tensors, meta = ad.load_checkpoint(path)
    meta = meta or {}
    config = ModelConfig(
        config_id=meta.get("config_id", "lr-ws+sf"),
        channels=tuple(int(c) for c in meta.get("channels", "32,64,128").split(",")),
        emb_dim=int(meta.get("emb_dim", 64)),
        canvas=int(meta.get("canvas", 48)),
        base=int(meta.get("base", 12)),
    )
    sched = VarianceSchedule(float(meta.get("sigma_min", 0.01)), float(meta.get("sigma_max", 50.0)),
                             float(meta.get("t_min", 1e-3)))
    norm = {}
    for key, value in meta.items():
        if key.startswith("norm."):
            mu, sd = value.split(",")
            norm[key[5:]] = (float(mu), float(sd))
    net = ScoreNetwork(config, sched, norm=norm)
    net.load_state_dict(tensors)
    return net, meta


# ------------------------------------------------------------------ training
def validation_loss(net: ScoreNetwork, batch: TrainBatch, seed: int, p_uncond: float = 0.0) -> float:
    """DSM loss on a fixed batch with a fixed noise stream (no gradients)."""
    return dsm_loss(net, batch, net.schedule, np.random.default_rng(seed), p_uncond, backward=False).loss


@dataclass
class TrainResult:
    net: ScoreNetwork
    losses: list  # (step, loss, grad_norm, n_null)
    val: list  # (step, val_loss, val_mae)
    best_state: dict
    best_val: float
    n_null: int


class WeightAverage:
    """Exponential moving average of the parameters, with the usual warm-up on the decay."""

    def __init__(self, net: ScoreNetwork, decay: float):
        self.decay = decay
        self.n = 0
        self.state = {k: a.astype(np.float64) for k, a in net.state_dict().items()}

    def update(self, net: ScoreNetwork):
        self.n += 1
        d = min(self.decay, (1 + self.n) / (10 + self.n))
        for k, a in net.state_dict().items():
            self.state[k] *= d
            self.state[k] += (1 - d) * a

    def swap_in(self, net: ScoreNetwork) -> dict:
        """Load the averaged weights and return a copy of the live ones."""
        live = {k: a.copy() for k, a in net.state_dict().items()}
        net.load_state_dict(self.state)
        return live


def train(ds: Dataset, net: ScoreNetwork, cfg: TrainConfig, seed: int, on_step=None) -> TrainResult:
    rng = np.random.default_rng(mix64(seed, 1))
    groups = ds.groups["train"]
    val_groups = ds.groups["val"] or groups
    val_batch = draw_batch(ds, net, val_groups, np.random.default_rng(mix64(seed, 2)), cfg.val_batch)
    val_seed = mix64(seed, 3)
    opt = ad.Adam(net.params.values(), lr=cfg.lr, clip_norm=cfg.clip)
    ema = WeightAverage(net, cfg.ema) if cfg.ema > 0 else None
    losses, val = [], []
    best_val, best_state = math.inf, None
    n_null = 0
    for step in range(1, cfg.steps + 1):
        if cfg.lr_decay == "cosine":
            opt.lr = 0.5 * cfg.lr * (1 + math.cos(math.pi * (step - 1) / cfg.steps))
        batch = draw_batch(ds, net, groups, rng, cfg.batch_size)
        res = dsm_loss(net, batch, net.schedule, rng, cfg.p_uncond)
        if not math.isfinite(res.loss):
            raise NumericalError(f"non-finite training loss at step {step}")
        norm = opt.step()
        if not math.isfinite(norm):
            raise NumericalError(f"non-finite gradient norm at step {step}")
        if ema:
            ema.update(net)
        n_null += res.n_null
        losses.append((step, res.loss, norm, res.n_null))
        if on_step:
            on_step(step, res.loss)
        if step % cfg.val_every == 0 or step == cfg.steps:
            live = ema.swap_in(net) if ema else None
            v = validation_loss(net, val_batch, val_seed)
            mae = validation_mae(ds, net, cfg, val_seed) if cfg.val_mae_cases else float("nan")
            val.append((step, v, mae))
            log.info("step %d loss %.4f val loss %.4f val MAE(S) %.4f", step, res.loss, v, mae)
            if v < best_val:
                best_val = v
                best_state = {k: a.copy() for k, a in net.state_dict().items()}
            if live is not None and step < cfg.steps:
                net.load_state_dict(live)
    return TrainResult(net, losses, val, best_state, best_val, n_null)


def validation_mae(ds: Dataset, net: ScoreNetwork, cfg: TrainConfig, seed: int) -> float:
    """Ensemble-mean MAE at factor S on a few validation cases with a short EM run."""
    groups = select_cases(ds.groups["val"], cfg.val_mae_cases)
    if not groups:
        return float("nan")
    spec = SolverSpec("em", cfg.val_mae_steps, seed)
    ens = model_ensembles(ds, net, groups, net.config.canvas, spec, cfg.val_mae_members)
    return float(np.mean([np.abs(e.mean(axis=0) - g.truth).mean() for g, e in zip(groups, ens)]))


# ------------------------------------------------------------------ evaluation
RESOLUTION_INDEX = {"S": 0, "S/2": 1, "S/3": 2, "S/4": 3}


def select_cases(groups, cases_per_bin: int = 0, bins=None) -> list:
    """Test case groups ordered by init index, at most ``cases_per_bin`` per lead bin (0 = all)."""
    wanted = set(bins) if bins else set(range(1, len(BINS) + 1))
    counts = {}
    out = []
    for g in sorted(groups, key=lambda g: (g.init_index, g.lead)):
        b = assign_bin(g.lead)
        if b not in wanted:
            continue
        if cases_per_bin and counts.get(b, 0) >= cases_per_bin:
            continue
        counts[b] = counts.get(b, 0) + 1
        out.append(g)
    return out


def model_ensembles(ds: Dataset, net: ScoreNetwork, groups, size: int, spec: SolverSpec, K: int,
                    w: float = 0.0, chunk: int = 4, counter=None) -> list:
    """``K`` members per case at output size ``size``; member ``k`` is conditioned on forecast member ``k mod Kb``."""
    alpha = Fraction(size, net.config.base)
    out = []
    for start in range(0, len(groups), chunk):
        part = groups[start:start + chunk]
        conds, seeds = [], []
        for g in part:
            kb = g.forecasts.shape[0]
            conds.append([group_condition(ds, g, k % kb, alpha) for k in range(K)])
            seeds.append(mix64(spec.seed, (g.init_index << 8) + int(g.lead)))
        ens = _sample_member_conditions(net, conds, spec, seeds, w, counter)
        out.extend(ens)
    return out


def _sample_member_conditions(net, conds, spec, seeds, w, counter):
    """Like :func:`sample_cases` but with one condition per member."""
    s = net.config.canvas
    K = len(conds[0])
    flat = [c for case in conds for c in case]
    for c in flat:
        c.validate()
    streams = MemberStreams([mix64(seed, i) for seed in seeds for i in range(K)])

    def score_fn(x, t):
        if counter is not None:
            counter[0] += 1
        if w == 0:
            return net.score(x, t, flat)
        return (1 + w) * net.score(x, t, flat) - w * net.score(x, t, [c.as_null() for c in flat])

    std = solve(score_fn, net.schedule, spec, (len(flat), s, s), rng=streams)
    if not np.all(np.isfinite(std)):
        raise NumericalError("non-finite values in sampled ensemble")
    return list(net.destandardize_target(std).reshape(len(conds), K, s, s))


def evaluate_model(ds: Dataset, net: ScoreNetwork, spec: SolverSpec, K: int, resolutions=("S", "S/2", "S/3", "S/4"),
                   cases_per_bin: int = 0, bins=None, w: float = 0.0, maps: bool = True) -> MetricReport:
    fs = enumerate_factors(net.config.base, net.config.canvas)
    groups = select_cases(ds.groups["test"], cases_per_bin, bins)
    cases = [EvalCase(g.init_index, g.lead, g.truth, g.forecasts, {}) for g in groups]
    for label in resolutions:
        size = fs.sizes[RESOLUTION_INDEX[label]]
        log.info("sampling %d cases at %s (%dx%d)", len(groups), label, size, size)
        for case, ens in zip(cases, model_ensembles(ds, net, groups, size, spec, K, w)):
            case.model[size] = ens
    clim = np.stack([g.truth for g in ds.groups["train"]])
    return evaluate_run(cases, clim, net.config.canvas, net.config.base, maps=maps)


def write_maps(report: MetricReport, out_dir, images: bool = True):
    from .synthdata import write_grid

    out_dir = Path(out_dir)
    for (res, b, method, metric), fmap in sorted(report.maps.items()):
        stem = out_dir / res.replace("/", "_") / b / f"{method}_{metric}"
        write_grid(stem.with_suffix(".dsg"), fmap.astype(np.float32))
        if images:
            write_pgm(stem.with_suffix(".pgm"), fmap)


def write_pgm(path, fmap):
    """8-bit binary graymap, min-max scaled; the scale goes to a sidecar ``.txt``."""
    f = np.asarray(fmap, dtype=np.float64)
    finite = np.isfinite(f)
    lo = float(f[finite].min()) if finite.any() else 0.0
    hi = float(f[finite].max()) if finite.any() else 0.0
    span = hi - lo
    scaled = np.zeros(f.shape) if span == 0 else (np.where(finite, f, lo) - lo) / span
    img = np.clip(np.rint(scaled * 255), 0, 255).astype(np.uint8)
    h, w = img.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())
    path.with_suffix(".txt").write_text(f"min={lo!r}\nmax={hi!r}\nmissing_pixels={int((~finite).sum())}\n",
                                        encoding="utf-8")


def ablation(ds: Dataset, net: ScoreNetwork, solvers, steps_list, K: int, seed: int,
             resolutions=("S",), cases_per_bin: int = 1) -> list:
    """Rows ``(solver, steps, bin, mae, nfe_per_member)``; MAE of the ensemble mean, averaged over resolutions."""
    fs = enumerate_factors(net.config.base, net.config.canvas)
    groups = select_cases(ds.groups["test"], cases_per_bin)
    bins = [assign_bin(g.lead) for g in groups]
    rows = []
    for solver in solvers:
        for steps in steps_list:
            spec = SolverSpec(solver, steps, seed)
            per_bin = {b: [] for b in range(1, len(BINS) + 1)}
            nfe = [0]
            for label in resolutions:
                size = fs.sizes[RESOLUTION_INDEX[label]]
                ens = model_ensembles(ds, net, groups, size, spec, K, counter=nfe)
                for g, b, e in zip(groups, bins, ens):
                    err = np.abs(np.sort(e, axis=0).mean(axis=0) - pixelate(g.truth, size)).mean()
                    per_bin[b].append(err)
            chunks = len(resolutions) * math.ceil(len(groups) / 4)
            nfe_member = nfe[0] // max(1, chunks)
            log.info("%s %d steps: %d score evaluations per member", spec.method, steps, nfe_member)
            for b in range(1, len(BINS) + 1):
                mae = float(np.mean(per_bin[b])) if per_bin[b] else float("nan")
                rows.append((solver, steps, f"Bin{b}", mae, nfe_member))
    return rows
