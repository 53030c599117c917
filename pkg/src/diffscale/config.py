"""Plain ``section.key=value`` run configuration.

Every key has a default except the top-level ``seed``. Sub-seeds for the
world, training and sampling are derived from it unless set explicitly.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .pipeline import TrainConfig
from .sampler import SolverSpec, mix64
from .scorenet import ModelConfig
from .sde import VarianceSchedule
from .synthdata import WorldConfig

# tags for sub-seed derivation
WORLD_TAG, TRAIN_TAG, SAMPLE_TAG, INIT_TAG = 11, 12, 13, 14


@dataclass(frozen=True)
class ModelSection:
    config_id: str = "lr-ws+sf"
    channels: tuple = (32, 64, 128)
    emb_dim: int = 64


@dataclass(frozen=True)
class DiffusionSection:
    sigma_min: float = 0.01
    sigma_max: float = 50.0
    t_min: float = 1e-3


@dataclass(frozen=True)
class TrainSection(TrainConfig):
    seed: int | None = None
    checkpoint: str = "final"  # which checkpoint later commands load: final | best


@dataclass(frozen=True)
class SampleSection:
    solver: str = "em"
    steps: int = 100
    K: int = 10
    w: float = 0.0
    seed: int | None = None
    chunk: int = 4


@dataclass(frozen=True)
class EvalSection:
    cases_per_bin: int = 0  # 0 = every test case
    resolutions: tuple = ("S", "S/2", "S/3", "S/4")
    maps: bool = True
    images: bool = True
    best: bool = True  # also score the best-validation checkpoint


@dataclass(frozen=True)
class AblateSection:
    solvers: tuple = ("em", "pf", "heun")
    steps: tuple = (50, 100, 500, 1000)
    cases_per_bin: int = 1
    K: int = 4
    resolutions: tuple = ("S",)


@dataclass(frozen=True)
class PathsSection:
    data: str = "run/data"
    run: str = "run/model"
    eval: str = "run/eval"
    samples: str = "run/samples"


_WORLD_KEYS = [k for k in WorldConfig.keys() if k != "seed"]


@dataclass(frozen=True)
class RunConfig:
    seed: int
    world: dict = field(default_factory=dict)
    model: ModelSection = ModelSection()
    diffusion: DiffusionSection = DiffusionSection()
    train: TrainSection = TrainSection()
    sample: SampleSection = SampleSection()
    eval: EvalSection = EvalSection()
    ablate: AblateSection = AblateSection()
    paths: PathsSection = PathsSection()

    # -------------------------------------------------------- derived objects
    def world_config(self) -> WorldConfig:
        return WorldConfig(seed=mix64(self.seed, WORLD_TAG), **self.world)

    def model_config(self) -> ModelConfig:
        w = self.world_config()
        return ModelConfig(self.model.config_id, tuple(self.model.channels), self.model.emb_dim, w.S, w.L)

    def schedule(self) -> VarianceSchedule:
        d = self.diffusion
        return VarianceSchedule(d.sigma_min, d.sigma_max, d.t_min)

    def train_seed(self) -> int:
        return self.train.seed if self.train.seed is not None else mix64(self.seed, TRAIN_TAG)

    def init_seed(self) -> int:
        return mix64(self.train_seed(), INIT_TAG)

    def sample_seed(self) -> int:
        return self.sample.seed if self.sample.seed is not None else mix64(self.seed, SAMPLE_TAG)

    def solver(self, method=None, steps=None) -> SolverSpec:
        return SolverSpec(method or self.sample.solver, steps or self.sample.steps, self.sample_seed())

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(**{f.name: getattr(t, f.name) for f in fields(TrainConfig)})


SECTIONS = {
    "model": ModelSection,
    "diffusion": DiffusionSection,
    "train": TrainSection,
    "sample": SampleSection,
    "eval": EvalSection,
    "ablate": AblateSection,
    "paths": PathsSection,
}


def _convert(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(x) for x in items)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if default is None:  # optional integer seeds
            return None if raw.lower() in ("", "none") else int(raw)
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None
    return raw


def parse_lines(lines) -> dict:
    """``key=value`` pairs; blank lines and ``#`` comments ignored."""
    out = {}
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_config(pairs: dict) -> RunConfig:
    """Validate keys and types; unknown keys raise ``ConfigError`` naming the key."""
    if "seed" not in pairs:
        raise ConfigError("missing required key: seed")
    try:
        seed = int(pairs["seed"])
    except ValueError:
        raise ConfigError(f"invalid value for seed: {pairs['seed']!r}") from None
    if seed < 0:
        raise ConfigError("seed must be non-negative")
    world_defaults = WorldConfig()
    world, sections = {}, {name: {} for name in SECTIONS}
    for key, raw in pairs.items():
        if key == "seed":
            continue
        section, _, name = key.partition(".")
        if section == "world" and name in _WORLD_KEYS:
            world[name] = _convert(key, raw, getattr(world_defaults, name))
        elif section in SECTIONS and name in {f.name for f in fields(SECTIONS[section])}:
            default = getattr(SECTIONS[section](), name)
            sections[section][name] = _convert(key, raw, default)
        else:
            raise ConfigError(f"unknown config key: {key}")
    built = {name: replace(cls(), **sections[name]) for name, cls in SECTIONS.items()}
    cfg = RunConfig(seed, world, **built)
    # fail early on inconsistent values
    cfg.world_config()
    cfg.model_config()
    cfg.schedule()
    cfg.solver()
    for s in cfg.ablate.solvers:
        SolverSpec(s, 1)
    if cfg.train.checkpoint not in ("final", "best"):
        raise ConfigError("train.checkpoint must be 'final' or 'best'")
    if cfg.sample.K < 1 or cfg.ablate.K < 1:
        raise ConfigError("ensemble sizes must be >= 1")
    if not (0 <= cfg.train.p_uncond < 1):
        raise ConfigError("train.p_uncond must lie in [0, 1)")
    if not (0 <= cfg.train.ema < 1):
        raise ConfigError("train.ema must lie in [0, 1)")
    if cfg.train.lr_decay not in ("none", "cosine"):
        raise ConfigError("train.lr_decay must be 'none' or 'cosine'")
    bad = [r for r in cfg.eval.resolutions + cfg.ablate.resolutions if r not in ("S", "S/2", "S/3", "S/4")]
    if bad:
        raise ConfigError(f"unknown resolution label(s) {bad}; use S, S/2, S/3, S/4")
    return cfg


def load_config(path, overrides=()) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    pairs = parse_lines(path.read_text(encoding="utf-8").splitlines())
    pairs.update(parse_lines(overrides))
    return build_config(pairs)
