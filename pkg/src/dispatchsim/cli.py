"""Command line entry points: train, sweep, report, plot.

Configuration comes from an optional YAML file with ``env``, ``trainer`` and
``experiment`` sections; command line flags override it. Exit code is nonzero
if any sweep cell failed.
"""
from __future__ import annotations

import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .domain import GridTopology
from .env import EnvConfig, OrderDispatchEnv
from .harness import (
    POLICIES,
    ExperimentError,
    ExperimentSpec,
    emit_plots,
    read_rows,
    report,
    run_experiment,
)
from .qnet import save_checkpoint
from .trainer import Trainer, TrainerConfig, run_nod_episode

log = logging.getLogger("dispatchsim")


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise SystemExit(f"config file {path} must contain a mapping")
    return data


def build_env_config(cfg: dict) -> EnvConfig:
    section = dict(cfg.get("env", {}))
    kind = section.pop("kind", "square8")
    width = section.pop("width", 10)
    height = section.pop("height", width)
    topo = GridTopology.square8(width, height) if kind == "square8" else GridTopology.hex6(width, height)
    return EnvConfig(topology=topo, **section)


def build_trainer_config(cfg: dict) -> TrainerConfig:
    return TrainerConfig(**cfg.get("trainer", {}))


def _experiment_section(cfg: dict) -> dict:
    return dict(cfg.get("experiment", {}))


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    env_cfg = build_env_config(cfg)
    trainer_cfg = build_trainer_config(cfg)
    env_cfg = replace(env_cfg, drift_step=float(args.drift), seed=args.seed)
    if args.policy == "il":
        trainer_cfg = replace(trainer_cfg, kl_weight=0.0)
    elif args.policy == "kl_based":
        trainer_cfg = replace(trainer_cfg, kl_weight=float(args.lam))
    env = OrderDispatchEnv(env_cfg, record_trace=args.trace is not None)
    rows_path = Path(args.out) if args.out else None

    def emit(episode: int, adi: float, orr: float, wall: float) -> None:
        if rows_path is None:
            return
        fresh = not rows_path.exists() or rows_path.stat().st_size == 0
        with open(rows_path, "a") as fh:
            if fresh:
                fh.write("policy,lam,drift,seed,episode,adi,orr,wall_time_s\n")
            lam = float(args.lam) if args.policy == "kl_based" else 0.0
            fh.write(
                f"{args.policy},{lam!r},{float(args.drift)!r},{args.seed},{episode},{adi!r},{orr!r},{wall!r}\n"
            )

    import time

    if args.policy == "nod":
        for ep in range(args.episodes):
            t0 = time.perf_counter()
            adi, orr = run_nod_episode(env, ep, args.seed)
            emit(ep, adi, orr, time.perf_counter() - t0)
            print(f"episode {ep}: ADI={adi:.4f} ORR={orr:.4f}")
    else:
        trainer = Trainer(env_cfg, trainer_cfg, args.seed, metrics_path=args.train_log)
        for ep in range(args.episodes):
            t0 = time.perf_counter()
            stats = trainer.train_episode(env, ep)
            adi, orr = trainer.eval_episode(env, ep)
            emit(ep, adi, orr, time.perf_counter() - t0)
            print(
                f"episode {ep}: ADI={adi:.4f} ORR={orr:.4f} "
                f"(train ADI={stats.adi:.4f} ORR={stats.orr:.4f} loss={stats.mean_loss:.5f})"
            )
        if args.save_checkpoint:
            save_checkpoint(trainer.online, trainer.opt, args.save_checkpoint)
            print(f"checkpoint written to {args.save_checkpoint}")
    if args.trace is not None:
        with open(args.trace, "w") as fh:
            for event in env.trace:
                fh.write(json.dumps(event, sort_keys=True) + "\n")
        print(f"trace written to {args.trace} ({len(env.trace)} events)")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    env_cfg = build_env_config(cfg)
    trainer_cfg = build_trainer_config(cfg)
    section = _experiment_section(cfg)
    policies = section.get("policies", list(POLICIES))
    episodes = args.episodes if args.episodes is not None else section.get("episodes", 300)
    seeds = tuple(section.get("seeds", (0, 1, 2, 3, 4)))
    common = dict(
        env=env_cfg,
        trainer=trainer_cfg,
        episodes=episodes,
        seeds=seeds,
        drifts=tuple(float(d) for d in (args.drift if args.drift else section.get("drifts", (1, 2, 4)))),
    )
    lambdas = section.get("lambdas")
    failures = 0
    for policy in policies:
        spec = ExperimentSpec(
            policy=policy,
            lambdas=tuple(float(l) for l in lambdas) if lambdas else None,
            **common,
        )
        try:
            rows = run_experiment(spec, args.out, resume=args.resume, jobs=args.jobs)
            print(f"{policy}: {len(rows)} rows in {args.out}")
        except ExperimentError as exc:
            failures += 1
            print(f"{policy}: FAILED cells: {exc}", file=sys.stderr)
    return 1 if failures else 0


def cmd_report(args: argparse.Namespace) -> int:
    rows = read_rows(args.results)
    rep = report(rows, baseline=args.baseline, window=args.window)
    print(rep.to_text())
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("policy,drift,lam,adi_mean,adi_std,orr_mean,orr_std,adi_improvement_pct,orr_improvement_pct\n")
            for e in rep.entries:
                fh.write(
                    f"{e.policy},{e.drift!r},{e.lam!r},{e.adi_mean!r},{e.adi_std!r},"
                    f"{e.orr_mean!r},{e.orr_std!r},{e.adi_improvement_pct!r},{e.orr_improvement_pct!r}\n"
                )
        print(f"report written to {args.out}")
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    rows = read_rows(args.results)
    files = emit_plots(rows, args.out_dir, window=args.window)
    for f in files:
        print(f)
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = argparse.ArgumentParser(prog="dispatchsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train / roll out a single cell")
    p_train.add_argument("--config", default=None)
    p_train.add_argument("--policy", choices=POLICIES, default="kl_based")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p_train.add_argument("--drift", type=float, default=1.0)
    p_train.add_argument("--episodes", type=int, default=300)
    p_train.add_argument("--out", default=None, help="append per-episode result rows to this CSV")
    p_train.add_argument("--train-log", default=None, help="trainer metrics CSV (episode, loss, ...)")
    p_train.add_argument("--trace", default=None, help="write environment event trace as JSON lines")
    p_train.add_argument("--save-checkpoint", default=None)
    p_train.set_defaults(func=cmd_train)

    p_sweep = sub.add_parser("sweep", help="run the policy x lambda x drift x seed grid")
    p_sweep.add_argument("--config", default=None)
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--episodes", type=int, default=None)
    p_sweep.add_argument("--drift", type=float, action="append", default=None)
    p_sweep.add_argument("--jobs", type=int, default=1)
    p_sweep.add_argument("--resume", action="store_true", default=True)
    p_sweep.add_argument("--no-resume", dest="resume", action="store_false")
    p_sweep.set_defaults(func=cmd_sweep)

    p_report = sub.add_parser("report", help="baseline comparison table from a results CSV")
    p_report.add_argument("results")
    p_report.add_argument("--baseline", default="nod")
    p_report.add_argument("--window", type=int, default=10)
    p_report.add_argument("--out", default=None)
    p_report.set_defaults(func=cmd_report)

    p_plot = sub.add_parser("plot", help="emit lambda-sweep figures from a results CSV")
    p_plot.add_argument("results")
    p_plot.add_argument("--out-dir", required=True)
    p_plot.add_argument("--window", type=int, default=10)
    p_plot.set_defaults(func=cmd_plot)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
