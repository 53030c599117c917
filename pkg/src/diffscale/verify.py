"""Forecast verification: lead-time bins, deterministic and ensemble scores, reports.

Undefined cells (empty bins, zero-variance correlations, zero reference CRPS)
are carried as NaN internally and written as ``NA``; they are never zero.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, DomainError
from .grid import bilinear_resize, enumerate_factors, nearest_expand, pixelate

BINS = ((1, 3), (4, 6), (7, 9), (10, 12), (13, 15), (16, 46))
BIN_NAMES = tuple(f"Bin{i}" for i in range(1, len(BINS) + 1))
METHODS = ("climatology", "baseline", "model")
METRICS = ("bias", "mae", "mse", "rmse", "acc", "crps", "crpss")
MISSING = "NA"


def assign_bin(lead_day) -> int:
    """1-based bin index covering an integer lead day."""
    if lead_day != int(lead_day):
        raise DomainError(f"bins are defined on integer lead days, got {lead_day}")
    d = int(lead_day)
    for i, (lo, hi) in enumerate(BINS, start=1):
        if lo <= d <= hi:
            return i
    raise DomainError(f"lead day must lie in [1, 46], got {lead_day}")


# ------------------------------------------------------------ deterministic maps
def _pair(preds, truths):
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 3:
        raise DimensionError(f"expected matching (cases, H, W) stacks, got {p.shape} and {t.shape}")
    return p, t


def _missing_like(p):
    return np.full(p.shape[1:], np.nan)


def bias_map(preds, truths) -> np.ndarray:
    p, t = _pair(preds, truths)
    return _missing_like(p) if len(p) == 0 else (p - t).mean(axis=0)


def mae_map(preds, truths) -> np.ndarray:
    p, t = _pair(preds, truths)
    return _missing_like(p) if len(p) == 0 else np.abs(p - t).mean(axis=0)


def mse_map(preds, truths) -> np.ndarray:
    p, t = _pair(preds, truths)
    return _missing_like(p) if len(p) == 0 else np.square(p - t).mean(axis=0)


def rmse_map(preds, truths) -> np.ndarray:
    return np.sqrt(mse_map(preds, truths))


def acc_map(preds, truths, clim_mean) -> np.ndarray:
    """Per-pixel Pearson correlation across cases of forecast and observed anomalies."""
    p, t = _pair(preds, truths)
    if len(p) < 2:
        return _missing_like(p)
    pa = p - clim_mean
    ta = t - clim_mean
    pa = pa - pa.mean(axis=0)
    ta = ta - ta.mean(axis=0)
    num = (pa * ta).sum(axis=0)
    den = np.sqrt((pa * pa).sum(axis=0) * (ta * ta).sum(axis=0))
    out = np.full(num.shape, np.nan)
    # exact constancy test: centering rounding must not fake a tiny variance
    ok = (np.ptp(p, axis=0) > 0) & (np.ptp(t, axis=0) > 0) & (den > 0)
    out[ok] = num[ok] / den[ok]
    return out


# ------------------------------------------------------------ ensemble scores
def crps_ensemble(members, obs) -> float:
    """Empirical CRPS ``mean|x_i - y| - mean_ij |x_i - x_j| / 2`` for one scalar observation."""
    x = np.sort(np.asarray(members, dtype=np.float64).ravel())
    if x.size == 0:
        raise DimensionError("CRPS needs at least one member")
    return float(crps_fields(x[:, None], np.array([obs], dtype=np.float64))[0])


def _dispersion(sorted_members: np.ndarray) -> np.ndarray:
    """``sum_ij |x_i - x_j| / (2 K^2)`` from members sorted along axis 0."""
    k = sorted_members.shape[0]
    w = (2 * np.arange(1, k + 1) - k - 1).astype(np.float64)
    return np.tensordot(w, sorted_members, axes=(0, 0)) / (k * k)


def crps_fields(members, obs) -> np.ndarray:
    """Pointwise CRPS of an ensemble ``(K, ...)`` against observations ``(...)``."""
    x = np.sort(np.asarray(members, dtype=np.float64), axis=0)
    y = np.asarray(obs, dtype=np.float64)
    if x.shape[1:] != y.shape:
        raise DimensionError(f"ensemble {x.shape} does not match observations {y.shape}")
    return np.abs(x - y).mean(axis=0) - _dispersion(x)


def crpss(crps_model, crps_ref):
    """Skill ``1 - model/ref``; NaN (missing) where the reference is zero."""
    m = np.asarray(crps_model, dtype=np.float64)
    r = np.asarray(crps_ref, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(r > 0, 1.0 - m / np.where(r > 0, r, 1.0), np.nan)
    return float(out) if out.ndim == 0 else out


@dataclass
class Climatology:
    """Per-pixel empirical distribution of training truths."""

    sorted_members: np.ndarray  # (n, H, W), ascending along axis 0
    mean: np.ndarray
    _cumsum: np.ndarray = field(repr=False, default=None)
    _dispersion: np.ndarray = field(repr=False, default=None)

    @property
    def size(self) -> int:
        return self.sorted_members.shape[0]

    def crps(self, obs) -> np.ndarray:
        """CRPS of the climatological ensemble against one observed field."""
        y = np.asarray(obs, dtype=np.float64)
        x = self.sorted_members
        n = self.size
        if self._cumsum is None:
            self._cumsum = np.concatenate([np.zeros((1,) + x.shape[1:]), np.cumsum(x, axis=0)])
            self._dispersion = _dispersion(x)
        below = (x < y).sum(axis=0)
        s_below = np.take_along_axis(self._cumsum, below[None], axis=0)[0]
        s_total = self._cumsum[-1]
        abs_mean = (below * y - s_below + (s_total - s_below) - (n - below) * y) / n
        return abs_mean - self._dispersion


def build_climatology(truths) -> Climatology:
    x = np.asarray(truths, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] < 2:
        raise DimensionError("climatology needs at least two (H, W) training truths")
    return Climatology(np.sort(x, axis=0), x.mean(axis=0))


# ------------------------------------------------------------ reports
@dataclass
class MetricReport:
    rows: list = field(default_factory=list)  # (resolution, bin, method, metric, value)
    maps: dict = field(default_factory=dict)  # (resolution, bin, method, metric) -> (H, W)

    def add(self, resolution, bin_name, method, metric, value, fmap=None):
        self.rows.append((resolution, bin_name, method, metric, float(value)))
        if fmap is not None:
            self.maps[(resolution, bin_name, method, metric)] = fmap

    def value(self, resolution, bin_name, method, metric) -> float:
        for r in self.rows:
            if r[:4] == (resolution, bin_name, method, metric):
                return r[4]
        raise KeyError((resolution, bin_name, method, metric))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["resolution", "bin", "method", "metric", "value"])
        for res, b, method, metric, v in self.rows:
            w.writerow([res, b, method, metric, MISSING if math.isnan(v) else repr(v)])
        return buf.getvalue()

    def write_csv(self, path):
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def _spatial_mean(fmap) -> float:
    if np.all(np.isnan(fmap)):
        return float("nan")
    return float(np.nanmean(fmap))


@dataclass
class ResolutionCases:
    """Cases already brought to one evaluation resolution (all fields on a common grid)."""

    label: str
    inits: list
    leads: list
    truths: np.ndarray  # (n, H, W)
    model: np.ndarray  # (n, K, H, W)
    baseline: np.ndarray  # (n, Kb, H, W)
    climatology: Climatology


def _sorted_mean(ens: np.ndarray) -> np.ndarray:
    # sorting first makes the mean independent of member order, bit for bit
    return np.sort(ens, axis=1).mean(axis=1)


def score_resolution(cases: ResolutionCases, report: MetricReport, maps: bool = True) -> MetricReport:
    order = sorted(range(len(cases.leads)), key=lambda i: (cases.leads[i], cases.inits[i]))
    leads = [cases.leads[i] for i in order]
    truths = np.asarray(cases.truths, dtype=np.float64)[order]
    model = np.asarray(cases.model, dtype=np.float64)[order]
    base = np.asarray(cases.baseline, dtype=np.float64)[order]
    clim = cases.climatology
    bins = np.array([assign_bin(l) for l in leads], dtype=int)
    n = len(leads)
    hw = truths.shape[1:]
    det = {
        "climatology": np.broadcast_to(clim.mean, (n,) + hw),
        "baseline": _sorted_mean(base) if n else np.zeros((0,) + hw),
        "model": _sorted_mean(model) if n else np.zeros((0,) + hw),
    }
    crps_case = {
        "climatology": np.stack([clim.crps(t) for t in truths]) if n else np.zeros((0,) + hw),
        "baseline": np.stack([crps_fields(e, t) for e, t in zip(base, truths)]) if n else np.zeros((0,) + hw),
        "model": np.stack([crps_fields(e, t) for e, t in zip(model, truths)]) if n else np.zeros((0,) + hw),
    }
    for b, name in enumerate(BIN_NAMES, start=1):
        sel = bins == b
        clim_crps_map = crps_case["climatology"][sel].mean(axis=0) if sel.any() else np.full(hw, np.nan)
        for method in METHODS:
            p, t = det[method][sel], truths[sel]
            fmaps = {
                "bias": bias_map(p, t),
                "mae": mae_map(p, t),
                "mse": mse_map(p, t),
                "rmse": rmse_map(p, t),
                "acc": acc_map(p, t, clim.mean),
            }
            crps_map = crps_case[method][sel].mean(axis=0) if sel.any() else np.full(hw, np.nan)
            fmaps["crps"] = crps_map
            fmaps["crpss"] = crpss(crps_map, clim_crps_map)
            for metric in METRICS:
                if metric == "crpss":
                    value = crpss(_spatial_mean(crps_map), _spatial_mean(clim_crps_map)) if sel.any() else float("nan")
                else:
                    value = _spatial_mean(fmaps[metric])
                report.add(cases.label, name, method, metric, value, fmaps[metric] if maps else None)
    return report


RESOLUTION_LABELS = ("S", "S/2", "S/3", "S/4")


@dataclass
class EvalCase:
    init: int
    lead: float
    truth: np.ndarray  # (S, S)
    lowres: np.ndarray  # (Kb, L, L) raw coarse members
    model: dict  # output size -> (K, S, S) ensemble sampled at that factor


def evaluate_run(cases, clim_truths, canvas: int, base: int, maps: bool = True) -> MetricReport:
    """Score model, bilinear baseline and climatology at every resolution fraction.

    For fraction size ``s`` truths and climatology members are pixelated to
    ``s``; baseline members are bilinearly resized to ``s x s`` and expanded
    onto the canvas. Resolutions absent from every case's ``model`` dict are
    skipped.
    """
    fs = enumerate_factors(base, canvas)
    report = MetricReport()
    clim_truths = np.asarray(clim_truths)
    for label, size in zip(RESOLUTION_LABELS, fs.sizes):
        if not cases or not all(size in c.model for c in cases):
            continue
        clim = build_climatology(np.stack([pixelate(t, size) for t in clim_truths]))
        truths = np.stack([pixelate(c.truth, size) for c in cases])
        baseline = np.stack([
            np.stack([nearest_expand(bilinear_resize(m, size, size), canvas) for m in c.lowres])
            for c in cases])
        model = np.stack([c.model[size] for c in cases])
        rc = ResolutionCases(label, [c.init for c in cases], [c.lead for c in cases],
                             truths, model, baseline, clim)
        score_resolution(rc, report, maps=maps)
    return report
