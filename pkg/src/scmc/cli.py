"""Command-line entry point: ``scmc <experiment> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import EXPERIMENTS, parse_config
from .errors import ConfigError, SCMCError


def _threads(v):
    return v if v == "auto" else int(v)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scmc", description="Sequentially constrained Monte Carlo experiments.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--particles", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--stages", type=int)
        p.add_argument("--sweeps", type=int)
        p.add_argument("--out")
        p.add_argument("--threads", type=_threads)
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--resample", choices=("systematic", "multinomial"))
        p.add_argument("--checkpoints", type=lambda s: [int(v) for v in s.split(",") if v], help="comma-separated stages")
        p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
        if name in ("monotone", "manifold"):
            p.add_argument("--tau-max", type=float)
        if name == "monotone":
            p.add_argument("--toy", choices=("f1", "f2", "f3"))
        if name == "ricker-abc":
            p.add_argument("--replicates", type=int)
        if name in ("monotone", "sir", "ricker-abc"):
            p.add_argument("--data", help="observed data CSV instead of synthetic data")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    extra = {k: getattr(args, k, None) for k in ("tau_max", "toy", "replicates", "data")}
    try:
        cfg = parse_config(
            args.experiment,
            args.config,
            particles=args.particles,
            seed=args.seed,
            stages=args.stages,
            sweeps=args.sweeps,
            out=args.out,
            threads=args.threads,
            resample=args.resample,
            checkpoints=args.checkpoints,
            **extra,
        )
    except ConfigError as e:
        print(f"scmc: config error: {e}", file=sys.stderr)
        return e.exit_code
    print(cfg.to_json())
    if args.print_config:
        return 0
    from .experiments import run_experiment

    try:
        return run_experiment(cfg)
    except SCMCError as e:
        print(f"scmc: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        print(f"scmc: invalid input: {e}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
