"""Command line: ``run`` a config file or reproduce the 1-D ``toy``.

Set ``DSVGD_NUM_THREADS`` to cap the BLAS/OpenMP thread pools used by
the numeric kernels.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext

from threadpoolctl import threadpool_limits

from .config import ConfigError, ExperimentConfig, load_config
from .runner import run_experiment, toy_curves

THREADS_ENV = "DSVGD_NUM_THREADS"
EXIT_CONFIG = 2


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}: expected an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV}: must be >= 1, got {n}")
    return threadpool_limits(limits=n)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsvgd", description="Distributed SVGD experiment runner.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-round metrics")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment from a config file")
    run.add_argument("--config", required=True, help="INI config file")
    run.add_argument("--seed", type=int, help="override experiment.seed")
    run.add_argument("--out", help="override experiment.out")
    run.add_argument("--max-rows", type=int, help="cap dataset ingestion at this many rows")

    toy = sub.add_parser("toy", help="1-D mixture toy with a uniform prior, KDE curves per round")
    toy.add_argument("--protocol", default="dsvgd", choices=("dsvgd", "udsvgd", "svgd", "sgld", "dsgld"))
    toy.add_argument("--rounds", type=int, default=6)
    toy.add_argument("--particles", type=int, default=200)
    toy.add_argument("--steps", type=int, default=200, help="local (and distillation) steps per round")
    toy.add_argument("--lr", type=float, default=0.05)
    toy.add_argument("--seed", type=int, default=0)
    toy.add_argument("--out", default="runs/toy")
    return parser


def _run(args) -> int:
    overrides = {"experiment.seed": args.seed, "experiment.out": args.out, "data.max_rows": args.max_rows}
    cfg = load_config(args.config, overrides)
    result = run_experiment(cfg)
    if result.status != 0:
        print(f"error: {result.error} (see {result.out_dir / 'manifest.json'})", file=sys.stderr)
    else:
        print(f"wrote {result.out_dir / 'results.csv'}")
    return result.status


def _toy(args) -> int:
    cfg = ExperimentConfig(
        protocol=args.protocol,
        model="toy1d",
        toy_prior="uniform",
        seed=args.seed,
        out=args.out,
        particles=args.particles,
        rounds=args.rounds,
        local_steps=args.steps,
        distill_steps=args.steps,
        lr=args.lr,
        distill_lr=args.lr,
        a0=args.lr,
    )
    result = run_experiment(cfg, keep_history=True)
    if result.status != 0:
        print(f"error: {result.error}", file=sys.stderr)
        return result.status
    path = toy_curves(cfg, result.out_dir, result.history)
    print(f"wrote {result.out_dir / 'results.csv'} and {path}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return _run(args) if args.command == "run" else _toy(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
