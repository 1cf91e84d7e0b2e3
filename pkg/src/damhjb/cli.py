"""Command-line entry point.

Subcommands run the pipeline stages (``all`` runs every applicable stage):

    damhjb viability|hjb|levelset|reconstruct|simulate|validate|all
        --config run.toml [--out DIR] [--seed S] [--demo]

``DAMHJB_BACKEND`` selects the kernel backend (numba/numpy) and
``DAMHJB_THREADS`` caps the numba thread count; both are read at import.
"""

from __future__ import annotations

import argparse
import sys

from .config import parse_config
from .pipeline import STAGES, run_pipeline

__all__ = ["main"]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="damhjb",
        description="Pumped hydro storage dispatch: constrained HJB and "
                    "level-set solvers with Monte Carlo validation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "all"):
        p = sub.add_parser(name, help=f"run the {name} stage" if name != "all"
                           else "run every applicable stage")
        p.add_argument("--config", required=True, help="TOML or JSON run config")
        p.add_argument("--out", default=None, help="output directory "
                       "(default: [output].dir from the config)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the simulation seed")
        p.add_argument("--demo", action="store_true",
                       help="cap grids at demonstration resolution "
                       "(required for two-dam level-set runs)")
        if name == "simulate":
            p.add_argument("--policy", default=None,
                           help="directory holding a saved policy (.npz)")
            p.add_argument("--start", default=None,
                           help="start point t,x,y[,y2] (overrides config)")
            p.add_argument("--paths", type=int, default=None,
                           help="number of Monte Carlo paths")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    config = parse_config(args.config)

    if args.command == "simulate":
        from dataclasses import replace
        sim = config.sim
        if args.start is not None:
            sim = replace(sim, start=tuple(float(v)
                                           for v in args.start.split(",")))
        if args.paths is not None:
            sim = replace(sim, n_paths=args.paths)
        config = replace(config, sim=sim)

    stages = set(STAGES) if args.command == "all" else {args.command}
    if args.command == "all" and config.system.n_dams == 2 and not args.demo:
        # two-dam level-set needs demo resolution; 'all' keeps the rest
        stages -= {"levelset", "reconstruct"}
    result = run_pipeline(
        config, stages, out_dir=args.out, seed=args.seed, demo=args.demo,
        policy_dir=getattr(args, "policy", None))
    for stage, status in result.status.items():
        print(f"{stage}: {status}")
    print(f"artifacts in {result.out_dir}")
    return 0 if result.ok else 1


if __name__ == "__main__":
    sys.exit(main())
