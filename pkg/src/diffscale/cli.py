"""Command line entry point: ``synth | train | sample | evaluate | ablate``.

Exit codes: 0 success, 2 configuration or argument error, 3 missing or
unreadable input artifact, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import RunConfig, load_config
from .errors import ConfigError, DomainError, FormatError, NumericalError, UsageError
from .grid import enumerate_factors
from .sampler import sample_ensemble
from .scorenet import ScoreNetwork
from .synthdata import build_dataset, read_dataset, read_grid, write_dataset, write_grid

log = logging.getLogger("diffscale")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


class MissingArtifact(Exception):
    pass


def _path(cfg_dir: Path, p: str) -> Path:
    p = Path(p)
    return p if p.is_absolute() else cfg_dir / p


def _write_rows(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _load_data(cfg: RunConfig, root: Path):
    if not (root / "manifest.txt").exists():
        raise MissingArtifact(f"dataset not found at {root} (run 'synth' first)")
    return read_dataset(root, cfg.world_config())


def _load_model(cfg: RunConfig, run: Path) -> ScoreNetwork:
    name = "model.dspt" if cfg.train.checkpoint == "final" else "model_best.dspt"
    path = run / name
    if not path.exists():
        raise MissingArtifact(f"checkpoint not found at {path} (run 'train' first)")
    net, _ = pipeline.load_network(path)
    return net


# ------------------------------------------------------------------ commands
def cmd_synth(cfg: RunConfig, paths: dict, args) -> int:
    ds = build_dataset(cfg.world_config())
    n = write_dataset(ds, paths["data"])
    inits = {s: len(ds.init_indices(s)) for s in ds.groups}
    log.info("wrote %d manifest lines to %s; init times %s", n, paths["data"], inits)
    return EXIT_OK


def cmd_train(cfg: RunConfig, paths: dict, args) -> int:
    ds = _load_data(cfg, paths["data"])
    mcfg = cfg.model_config()
    net = ScoreNetwork(mcfg, cfg.schedule(), seed=cfg.init_seed(),
                       norm=pipeline.normalization_stats(ds, mcfg))
    tcfg = cfg.train_config()
    log.info("training %s with %d parameters for %d steps", mcfg.config_id, net.parameter_count(), tcfg.steps)
    res = pipeline.train(ds, net, tcfg, cfg.train_seed())
    run = paths["run"]
    run.mkdir(parents=True, exist_ok=True)
    pipeline.save_network(net, run / "model.dspt", tcfg.p_uncond, {"steps": str(tcfg.steps)})
    if res.best_state is not None:
        best = ScoreNetwork(mcfg, cfg.schedule(), norm=dict(net.norm))
        best.load_state_dict(res.best_state)
        pipeline.save_network(best, run / "model_best.dspt", tcfg.p_uncond, {"steps": str(tcfg.steps)})
    _write_rows(run / "loss.csv", ["step", "loss", "grad_norm", "n_null"], res.losses)
    _write_rows(run / "val.csv", ["step", "val_loss", "val_mae_S"], res.val)
    log.info("null-condition items drawn: %d", res.n_null)
    return EXIT_OK


def cmd_sample(cfg: RunConfig, paths: dict, args) -> int:
    if args.alpha is None or args.lead is None:
        raise ConfigError("sample needs --alpha and --lead")
    members = args.members if args.members is not None else cfg.sample.K
    if members < 1:
        raise ConfigError(f"--members must be >= 1, got {members}")
    net = _load_model(cfg, paths["run"])
    fs = enumerate_factors(net.config.base, net.config.canvas)
    hi = float(max(fs.factors))
    if not (1.0 <= args.alpha <= hi):
        raise DomainError(f"--alpha {args.alpha} outside the trained range [1, {hi:g}]")
    if not (1.0 <= args.lead <= 46.0):
        raise DomainError(f"--lead {args.lead} outside [1, 46] days")
    ds = _load_data(cfg, paths["data"])
    split = "test" if ds.groups["test"] else "train"
    pool = sorted(ds.groups[split], key=lambda g: (g.init_index, g.lead))
    if args.init is not None:
        pool = [g for g in pool if g.init_index == args.init]
        if not pool:
            raise ConfigError(f"--init {args.init} not found in the {split} split")
    # condition grids come from the stored case closest in lead; the lead value itself stays continuous
    group = min(pool, key=lambda g: (abs(g.lead - args.lead), g.init_index))
    cond = pipeline.group_condition(ds, group, 0, args.alpha)
    cond.lead = float(args.lead)
    if args.forecast:
        fc = read_grid(args.forecast)[0]
        if fc.shape != (net.config.base, net.config.base):
            raise ConfigError(f"--forecast grid must be {net.config.base}x{net.config.base}, got {fc.shape}")
        cond.lowres_ws = fc
    ens = sample_ensemble(net, cond, net.schedule, cfg.solver(), members, cfg.sample.w)
    out = Path(args.out) if args.out else paths["samples"]
    out.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(ens.members):
        write_grid(out / f"member_{i:02d}.dsg", m.astype(np.float32))
    write_grid(out / "mean.dsg", ens.mean().astype(np.float32))
    log.info("wrote %d members for lead %g alpha %g to %s", members, args.lead, args.alpha, out)
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, paths: dict, args) -> int:
    """Scores the final checkpoint and, with ``eval.best``, the best-validation one."""
    run = paths["run"]
    if not (run / "model.dspt").exists():
        raise MissingArtifact(f"checkpoint not found at {run / 'model.dspt'} (run 'train' first)")
    ds = _load_data(cfg, paths["data"])
    if not ds.groups["test"]:
        raise MissingArtifact("dataset has no test split")
    ev = cfg.eval
    out = paths["eval"]
    out.mkdir(parents=True, exist_ok=True)
    targets = [("model.dspt", "metrics.csv", True)]
    if ev.best and (run / "model_best.dspt").exists():
        targets.append(("model_best.dspt", "metrics_best.csv", False))
    for ckpt, name, with_maps in targets:
        net, _ = pipeline.load_network(run / ckpt)
        report = pipeline.evaluate_model(ds, net, cfg.solver(), cfg.sample.K, ev.resolutions,
                                         ev.cases_per_bin, w=cfg.sample.w, maps=ev.maps and with_maps)
        report.write_csv(out / name)
        if ev.maps and with_maps:
            pipeline.write_maps(report, out / "maps", images=ev.images)
        log.info("wrote %d metric rows to %s", len(report.rows), out / name)
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, paths: dict, args) -> int:
    net = _load_model(cfg, paths["run"])
    ds = _load_data(cfg, paths["data"])
    ab = cfg.ablate
    rows = pipeline.ablation(ds, net, ab.solvers, ab.steps, ab.K, cfg.sample_seed(),
                             ab.resolutions, ab.cases_per_bin)
    out = paths["eval"]
    _write_rows(out / "ablation.csv", ["solver", "steps", "bin", "mae", "nfe"], rows)
    log.info("wrote %d ablation rows to %s", len(rows), out / "ablation.csv")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffscale", description="Continuous-condition diffusion downscaling.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="key=value run configuration")
    p.add_argument("overrides", nargs="*", help="extra key=value pairs overriding the file")
    p.add_argument("--alpha", type=float, help="scaling factor for 'sample'")
    p.add_argument("--lead", type=float, help="lead time in days for 'sample'")
    p.add_argument("--members", type=int, help="ensemble size for 'sample'")
    p.add_argument("--init", type=int, help="init index whose condition grids 'sample' uses")
    p.add_argument("--forecast", help="DSG1 low-resolution forecast to condition 'sample' on")
    p.add_argument("--out", help="output directory for 'sample'")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


@contextlib.contextmanager
def _thread_cap():
    raw = os.environ.get("DIFFSCALE_THREADS")
    if not raw:
        yield
        return
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DIFFSCALE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("DIFFSCALE_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_intermixed_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = load_config(args.config, args.overrides)
        cfg_dir = Path(args.config).resolve().parent
        paths = {k: _path(cfg_dir, getattr(cfg.paths, k)) for k in ("data", "run", "eval", "samples")}
        with _thread_cap():
            return COMMANDS[args.command](cfg, paths, args)
    except (ConfigError, DomainError, UsageError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (MissingArtifact, FileNotFoundError, FormatError) as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
