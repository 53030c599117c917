"""Synthetic forecast/truth world and the ``DSG1`` grid format.

Truth is a spectrally synthesized wind-speed field evolving day by day;
coarse ensemble "forecasts" are blurred, noised and biased copies of the truth
at the valid time whose error grows and saturates with lead time. Static
priors (orography, land-sea mask) shape both.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, fields
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DomainError, FormatError, TruncationError
from .grid import bilinear_resize, block_coarsen, enumerate_factors
from .sampler import mix64
from .scorenet import DYNAMIC_CHANNELS

SPLITS = ("train", "val", "test")
LEAD_MIN, LEAD_MAX = 1.0, 46.0

# stream tags for seed derivation
_STATIC, _TRUTH, _INIT, _LEADS, _DYN = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class WorldConfig:
    S: int = 48
    L: int = 12
    beta: float = 3.0
    rho: float = 0.9
    a: float = 0.5
    tau_e: float = 10.0
    b0: float = 0.3
    s_e: float = 0.3
    seed: int = 0
    n_train: int = 600
    n_val: int = 100
    n_test: int = 104
    members: int = 10
    train_leads: int = 4
    init_spacing: int = 3
    blur_per_day: float = 0.1
    dynamic: bool = False

    def __post_init__(self):
        enumerate_factors(self.L, self.S)
        if not (0 < self.rho < 1):
            raise ConfigError(f"truth AR coefficient must lie in (0, 1), got {self.rho}")
        if self.members < 1 or self.init_spacing < 1:
            raise ConfigError("members and init_spacing must be positive")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("split sizes must be non-negative")

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------- random fields
@lru_cache(maxsize=16)
def spectral_amplitude(n: int, slope: float) -> np.ndarray:
    """Amplitude ``|k|^(-slope/2)`` on the FFT grid (zero at k = 0), so power goes as ``|k|^-slope``.

    Normalized so unit complex noise yields a unit-variance real field.
    """
    k = np.fft.fftfreq(n) * n
    kk = np.sqrt(k[:, None] ** 2 + k[None, :] ** 2)
    amp = np.zeros_like(kk)
    amp[kk > 0] = kk[kk > 0] ** (-slope / 2)
    amp = amp / np.sqrt(np.sum(amp**2) / 2)
    amp.flags.writeable = False
    return amp


def complex_noise(n: int, rng) -> np.ndarray:
    z = rng.standard_normal((2, n, n)) * (1 / math.sqrt(2))
    return z[0] + 1j * z[1]


def coefficients_to_field(coef: np.ndarray) -> np.ndarray:
    """Real part of the inverse FFT, scaled so unit-variance coefficients give a unit-variance field."""
    n = coef.shape[0]
    return np.real(np.fft.ifft2(coef)) * n * n


def gaussian_random_field(n: int, slope: float, rng) -> np.ndarray:
    return coefficients_to_field(spectral_amplitude(n, slope) * complex_noise(n, rng))


def radial_spectrum(f: np.ndarray):
    """Radially averaged periodogram; returns integer wavenumbers 1..n/2 and mean power."""
    n = f.shape[0]
    p = np.abs(np.fft.fft2(f)) ** 2
    k = np.fft.fftfreq(n) * n
    kr = np.rint(np.sqrt(k[:, None] ** 2 + k[None, :] ** 2)).astype(int)
    ks = np.arange(1, n // 2 + 1)
    power = np.array([p[kr == kk].mean() for kk in ks])
    return ks, power


# ---------------------------------------------------------------- statics
def gen_static_fields(cfg: WorldConfig) -> dict:
    rng = np.random.default_rng(mix64(cfg.seed, _STATIC))
    n = cfg.S
    oro = gaussian_filter(gaussian_random_field(n, 4.0, rng), 1.0, mode="wrap")
    oro = 1500.0 * np.maximum(oro - 0.2, 0.0)
    land = gaussian_random_field(n, 4.0, rng)
    thresh = np.median(land)
    mask = (land > thresh).astype(np.float64)
    # wrap-mode smoothing preserves the exact half/half mean
    land_sea = np.clip(gaussian_filter(mask, 1.0, mode="wrap"), 0.0, 1.0)
    oro = oro * land_sea
    return {"orography": oro, "land_sea": land_sea}


def normalized_orography(statics) -> np.ndarray:
    oro = statics["orography"]
    top = oro.max()
    return oro / top if top > 0 else np.zeros_like(oro)


def softplus(x):
    return np.logaddexp(0.0, x)


# ---------------------------------------------------------------- truth
@dataclass
class TruthSeries:
    fields: np.ndarray  # (days, S, S) wind speed
    latent: np.ndarray  # (days, S, S) pre-transform unit field
    coefficients: np.ndarray  # (days, S, S) complex AR(1) state

    def at(self, time: float) -> np.ndarray:
        """Truth at a fractional day by linear interpolation between daily fields."""
        lo = int(math.floor(time))
        frac = time - lo
        if lo < 0 or lo >= len(self.fields) or (frac > 0 and lo + 1 >= len(self.fields)):
            raise DomainError(f"time {time} outside the generated truth series")
        if frac == 0:
            return self.fields[lo]
        return (1 - frac) * self.fields[lo] + frac * self.fields[lo + 1]

    def latent_at(self, time: float) -> np.ndarray:
        lo = int(math.floor(time))
        frac = time - lo
        if frac == 0:
            return self.latent[lo]
        return (1 - frac) * self.latent[lo] + frac * self.latent[lo + 1]


def truth_transform(latent: np.ndarray, statics) -> np.ndarray:
    """Map a unit latent field to non-negative wind speed shaped by the static priors."""
    return softplus(4.0 + 2.0 * latent + 1.0 * (1.0 - statics["land_sea"])
                    - 0.5 * normalized_orography(statics))


def gen_truth_series(cfg: WorldConfig, statics, n_days: int) -> TruthSeries:
    """AR(1)-evolved spectral field, ``n_days`` daily snapshots.

    Sea cells (land_sea = 0) get a +1 m/s mean lift and high orography damps
    the wind; the positivity map is a softplus.
    """
    if n_days < 1:
        raise DomainError("need at least one day of truth")
    rng = np.random.default_rng(mix64(cfg.seed, _TRUTH))
    n = cfg.S
    amp = spectral_amplitude(n, cfg.beta)
    innov = math.sqrt(1 - cfg.rho**2)
    coef = complex_noise(n, rng)
    coefs = np.empty((n_days, n, n), dtype=np.complex128)
    for d in range(n_days):
        if d:
            coef = cfg.rho * coef + innov * complex_noise(n, rng)
        coefs[d] = coef
    latent = np.stack([coefficients_to_field(amp * c) for c in coefs])
    fields_ = truth_transform(latent, statics)
    return TruthSeries(fields_, latent, coefs)


# ---------------------------------------------------------------- forecasts
def error_scale(lead, cfg: WorldConfig):
    """Saturating forecast-error amplitude ``a (1 - exp(-lead / tau_e))``."""
    return cfg.a * (1.0 - np.exp(-np.asarray(lead, dtype=np.float64) / cfg.tau_e))


def bias_pattern(cfg: WorldConfig, statics) -> np.ndarray:
    """Over-forecast over sea/coast, under-forecast inland."""
    ls = statics["land_sea"]
    return -cfg.b0 * (ls - ls.mean()) * 2.0


def smooth_noise(n: int, rng) -> np.ndarray:
    f = gaussian_random_field(n, 3.0, rng)
    return f / f.std()


def degrade_forecast(truth_valid, lead: float, member: int, cfg: WorldConfig, statics, rng,
                     init_error=None) -> np.ndarray:
    """One coarse ensemble member for a truth field at its valid time.

    ``init_error`` is the unit error pattern shared by all members of an
    initialization; ``rng`` supplies the member perturbation (and the error
    pattern when none is given).
    """
    if not (LEAD_MIN <= lead <= LEAD_MAX):
        raise DomainError(f"lead time must lie in [1, 46] days, got {lead}")
    if init_error is None:
        init_error = smooth_noise(cfg.S, rng)
    return _perturb_blurred(blur_truth(truth_valid, lead, cfg), lead, cfg, statics, rng, init_error)


def blur_truth(truth_valid, lead: float, cfg: WorldConfig) -> np.ndarray:
    return gaussian_filter(np.asarray(truth_valid, dtype=np.float64), cfg.blur_per_day * lead, mode="wrap")


def _perturb_blurred(blurred, lead, cfg, statics, rng, init_error) -> np.ndarray:
    n = cfg.S
    fine = blurred + error_scale(lead, cfg) * init_error
    fine = fine + cfg.s_e * smooth_noise(n, rng)
    fine = fine + bias_pattern(cfg, statics)
    return block_coarsen(np.maximum(fine, 0.0), cfg.L, cfg.L)


def gen_dynamic_channels(latent_valid, lead: float, cfg: WorldConfig, rng) -> np.ndarray:
    """Seven coarse auxiliary variables correlated with the truth's latent field, ``(7, L, L)``."""
    n = cfg.S
    skill = math.exp(-lead / (2 * cfg.tau_e))
    specs = {  # offset, scale, correlation sign
        "t2m": (285.0, 5.0, -0.6), "mslp": (1013.0, 8.0, -0.8), "u300": (15.0, 10.0, 0.5),
        "u925": (4.0, 5.0, 0.9), "v300": (0.0, 10.0, 0.3), "v925": (0.0, 5.0, 0.7),
        "z500": (5500.0, 80.0, -0.5),
    }
    out = np.empty((len(DYNAMIC_CHANNELS), cfg.L, cfg.L))
    for i, name in enumerate(DYNAMIC_CHANNELS):
        off, sc, corr = specs[name]
        c = corr * skill
        mixed = c * latent_valid + math.sqrt(1 - c * c) * smooth_noise(n, rng)
        out[i] = block_coarsen(off + sc * mixed, cfg.L, cfg.L)
    return out


# ---------------------------------------------------------------- dataset
@dataclass
class SampleRecord:
    split: str
    init_index: int
    lead: float
    member: int
    lowres_forecast: np.ndarray
    truth: np.ndarray
    priors: dict = field(default_factory=dict)


@dataclass
class CaseGroup:
    """All members for one (init, lead): the unit the files are organised by."""
    split: str
    init_index: int
    lead: float
    forecasts: np.ndarray  # (members, L, L)
    truth: np.ndarray  # (S, S)
    dynamic: np.ndarray | None = None  # (members, 7, L, L)

    def records(self, statics) -> list:
        out = []
        for m in range(self.forecasts.shape[0]):
            priors = dict(statics)
            if self.dynamic is not None:
                priors.update({name: self.dynamic[m, i] for i, name in enumerate(DYNAMIC_CHANNELS)})
            out.append(SampleRecord(self.split, self.init_index, self.lead, m,
                                    self.forecasts[m], self.truth, priors))
        return out


@dataclass
class Dataset:
    config: WorldConfig
    statics: dict
    groups: dict  # split -> list[CaseGroup]

    def records(self, split: str) -> list:
        return [r for g in self.groups[split] for r in g.records(self.statics)]

    def init_indices(self, split: str) -> set:
        return {g.init_index for g in self.groups[split]}


def split_ranges(cfg: WorldConfig) -> dict:
    """Disjoint init-index ranges, separated so no valid time is shared across splits."""
    gap = math.ceil(LEAD_MAX / cfg.init_spacing) + 1
    out, start = {}, 0
    for split, n in zip(SPLITS, (cfg.n_train, cfg.n_val, cfg.n_test)):
        out[split] = range(start, start + n)
        start += n + gap
    return out


def split_leads(cfg: WorldConfig, split: str, rng) -> list:
    """Continuous uniform leads for training; one integer day per evaluation bin otherwise."""
    if split == "train":
        return [round(float(x), 4) for x in rng.uniform(LEAD_MIN, LEAD_MAX, size=cfg.train_leads)]
    bins = ((1, 3), (4, 6), (7, 9), (10, 12), (13, 15), (16, 46))
    return [float(rng.integers(lo, hi + 1)) for lo, hi in bins]


def build_dataset(cfg: WorldConfig) -> Dataset:
    statics = gen_static_fields(cfg)
    ranges = split_ranges(cfg)
    last_init = max((r.stop for r in ranges.values() if len(r)), default=1)
    n_days = last_init * cfg.init_spacing + int(LEAD_MAX) + 2
    truth = gen_truth_series(cfg, statics, n_days)
    groups = {}
    for split in SPLITS:
        groups[split] = []
        for init in ranges[split]:
            init_seed = mix64(cfg.seed, (_INIT << 32) + init)
            leads = split_leads(cfg, split, np.random.default_rng(mix64(init_seed, _LEADS)))
            init_error = smooth_noise(cfg.S, np.random.default_rng(init_seed))
            t0 = init * cfg.init_spacing
            for j, lead in enumerate(leads):
                valid = truth.at(t0 + lead)
                blurred = blur_truth(valid, lead, cfg)
                fc = np.empty((cfg.members, cfg.L, cfg.L))
                dyn = np.empty((cfg.members, len(DYNAMIC_CHANNELS), cfg.L, cfg.L)) if cfg.dynamic else None
                for m in range(cfg.members):
                    rng = np.random.default_rng(mix64(init_seed, (j << 16) + m + 1))
                    fc[m] = _perturb_blurred(blurred, lead, cfg, statics, rng, init_error)
                    if dyn is not None:
                        drng = np.random.default_rng(mix64(init_seed, (_DYN << 40) + (j << 16) + m))
                        dyn[m] = gen_dynamic_channels(truth.latent_at(t0 + lead), lead, cfg, drng)
                groups[split].append(CaseGroup(split, init, lead, fc.astype(np.float32),
                                               valid.astype(np.float32),
                                               None if dyn is None else dyn.astype(np.float32)))
    statics = {k: v.astype(np.float32) for k, v in statics.items()}
    return Dataset(cfg, statics, groups)


def bilinear_baseline(lowres, size: int) -> np.ndarray:
    return bilinear_resize(lowres, size, size)


# ---------------------------------------------------------------- DSG1 files
GRID_MAGIC = b"DSG1"
GRID_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


def encode_grid(arr) -> bytes:
    a = np.asarray(arr)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise FormatError(f"grids are 2-D fields or channel stacks, got shape {a.shape}")
    c, h, w = a.shape
    return _HEADER.pack(GRID_MAGIC, GRID_VERSION, c, h, w) + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_grid(buf: bytes) -> np.ndarray:
    """Inverse of :func:`encode_grid`; always returns a ``(C, H, W)`` float32 stack."""
    if len(buf) < 4:
        raise TruncationError(f"grid file truncated: {len(buf)} bytes, header needs {_HEADER.size}")
    if buf[:4] != GRID_MAGIC:
        raise FormatError(f"bad grid magic {buf[:4]!r}, expected {GRID_MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncationError(f"grid file truncated: {len(buf)} bytes, header needs {_HEADER.size}")
    _, version, c, h, w = _HEADER.unpack_from(buf)
    if version != GRID_VERSION:
        raise FormatError(f"unsupported grid version {version}")
    need = _HEADER.size + 4 * c * h * w
    if len(buf) < need:
        raise TruncationError(f"grid file truncated: {len(buf)} of {need} bytes")
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after grid data")
    return np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(c, h, w).astype(np.float32)


def write_grid(path, arr) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_grid(arr))


def read_grid(path) -> np.ndarray:
    return decode_grid(Path(path).read_bytes())


# ---------------------------------------------------------------- on-disk dataset
MANIFEST = "manifest.txt"


def _group_paths(g: CaseGroup, j: int):
    stem = f"{g.split}/{g.init_index:05d}_{j:02d}"
    return f"forecast/{stem}.dsg", f"truth/{stem}.dsg", f"dynamic/{stem}.dsg"


def write_dataset(ds: Dataset, root) -> int:
    """Write grids, statics and the manifest; returns the number of manifest lines."""
    root = Path(root)
    write_grid(root / "statics.dsg", np.stack([ds.statics["orography"], ds.statics["land_sea"]]))
    lines = []
    for split in SPLITS:
        seen = {}
        for g in ds.groups[split]:
            j = seen.get(g.init_index, 0)
            seen[g.init_index] = j + 1
            fc_path, tr_path, dyn_path = _group_paths(g, j)
            write_grid(root / fc_path, g.forecasts)
            write_grid(root / tr_path, g.truth)
            extra = ""
            if g.dynamic is not None:
                m, c, h, w = g.dynamic.shape
                write_grid(root / dyn_path, g.dynamic.reshape(m * c, h, w))
                extra = f",{dyn_path}"
            for m in range(g.forecasts.shape[0]):
                lines.append(f"{split},{g.init_index},{g.lead!r},{m},{fc_path},{tr_path}{extra}")
    (root / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return len(lines)


def read_dataset(root, cfg: WorldConfig) -> Dataset:
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    st = read_grid(root / "statics.dsg")
    statics = {"orography": st[0], "land_sea": st[1]}
    groups = {s: [] for s in SPLITS}
    current = {}
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        parts = line.split(",")
        split, init, lead, _member, fc_path, tr_path = parts[:6]
        key = (split, fc_path)
        if key in current:
            continue
        dyn = None
        if len(parts) > 6:
            d = read_grid(root / parts[6])
            dyn = d.reshape(-1, len(DYNAMIC_CHANNELS), *d.shape[1:])
        g = CaseGroup(split, int(init), float(lead), read_grid(root / fc_path), read_grid(root / tr_path)[0], dyn)
        current[key] = g
        groups[split].append(g)
    return Dataset(cfg, statics, groups)
