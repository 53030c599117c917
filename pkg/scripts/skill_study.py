"""Train a small network on the default world and compare it with the baseline.

Reports ensemble-mean MAE and CRPSS against climatology at factor S for the
chosen lead bins, for the trained model and the bilinear baseline.

    python3 scripts/skill_study.py --steps 3000 --lr 1e-3 --save net.dspt
    python3 scripts/skill_study.py --load net.dspt --members 10
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import dataclass

from diffscale import pipeline
from diffscale.config import build_config
from diffscale.sampler import SolverSpec
from diffscale.scorenet import ScoreNetwork
from diffscale.synthdata import build_dataset


@dataclass(frozen=True)
class SkillStudyConfig:
    seed: int = 0
    channels: tuple = (16, 32, 64)
    emb_dim: int = 32
    steps: int = 3000
    batch_size: int = 8
    lr: float = 1e-3
    ema: float = 0.999
    lr_decay: str = "cosine"
    solver: str = "em"
    solver_steps: int = 50
    members: int = 10
    cases_per_bin: int = 10
    bins: tuple = (1, 2, 3)


def run(cfg: SkillStudyConfig, load=None, save=None):
    run_cfg = build_config({"seed": str(cfg.seed)})
    t0 = time.perf_counter()
    ds = build_dataset(run_cfg.world_config())
    logging.info("world built in %.0f s", time.perf_counter() - t0)
    if load:
        net, _ = pipeline.load_network(load)
    else:
        run_cfg = build_config({"seed": str(cfg.seed), "model.channels": ",".join(map(str, cfg.channels)),
                                "model.emb_dim": str(cfg.emb_dim)})
        mcfg = run_cfg.model_config()
        net = ScoreNetwork(mcfg, run_cfg.schedule(), seed=run_cfg.init_seed(),
                           norm=pipeline.normalization_stats(ds, mcfg))
        tcfg = pipeline.TrainConfig(batch_size=cfg.batch_size, steps=cfg.steps, lr=cfg.lr,
                                    ema=cfg.ema, lr_decay=cfg.lr_decay, val_every=max(1, cfg.steps // 6), val_mae_cases=0)
        t0 = time.perf_counter()
        pipeline.train(ds, net, tcfg, run_cfg.train_seed())
        logging.info("trained in %.0f s", time.perf_counter() - t0)
        if save:
            pipeline.save_network(net, save, tcfg.p_uncond)
    spec = SolverSpec(cfg.solver, cfg.solver_steps, run_cfg.sample_seed())
    report = pipeline.evaluate_model(ds, net, spec, cfg.members, ("S",), cfg.cases_per_bin,
                                     bins=cfg.bins, maps=False)
    rows = []
    for b in cfg.bins:
        name = f"Bin{b}"
        model = report.value("S", name, "model", "mae")
        base = report.value("S", name, "baseline", "mae")
        rows.append((name, model, base, 1 - model / base, report.value("S", name, "model", "crpss"),
                     report.value("S", name, "baseline", "crpss")))
    return rows


def main(argv=None):
    d = SkillStudyConfig()
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=d.steps)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--ema", type=float, default=d.ema)
    p.add_argument("--lr-decay", default=d.lr_decay, choices=("none", "cosine"))
    p.add_argument("--channels", default=",".join(map(str, d.channels)))
    p.add_argument("--members", type=int, default=d.members)
    p.add_argument("--cases-per-bin", type=int, default=d.cases_per_bin)
    p.add_argument("--solver-steps", type=int, default=d.solver_steps)
    p.add_argument("--load", help="skip training and score this checkpoint")
    p.add_argument("--save", help="write the trained checkpoint here")
    a = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = SkillStudyConfig(steps=a.steps, lr=a.lr, channels=tuple(int(c) for c in a.channels.split(",")),
                           members=a.members, cases_per_bin=a.cases_per_bin, solver_steps=a.solver_steps,
                           ema=a.ema, lr_decay=a.lr_decay)
    print(f"{'bin':5} {'model':>7} {'base':>7} {'margin':>7} {'crpss_m':>8} {'crpss_b':>8}")
    for name, model, base, margin, cm, cb in run(cfg, a.load, a.save):
        print(f"{name:5} {model:7.4f} {base:7.4f} {100 * margin:6.1f}% {cm:8.3f} {cb:8.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
