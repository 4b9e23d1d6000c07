"""Command line entry point: ``ecgipf {simulate,filter,maps,report} --config FILE``."""
from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError, MissingInputError, ResourceLimitError
from .pipeline import cmd_filter, cmd_maps, cmd_report, cmd_simulate, load_config

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RESOURCE = 0, 2, 3, 4
COMMANDS = ("simulate", "filter", "maps", "report")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ecgipf", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="INI experiment file")
    p.add_argument("--seed", type=int, help="base seed; repetition r uses seed + r")
    p.add_argument("--direction", choices=("fwd", "bwd", "both"))
    p.add_argument("--reps", type=int, help="number of repetitions R")
    p.add_argument("--workers", type=int, default=1, help="concurrent filter runs")
    p.add_argument("--out", help="output directory")
    p.add_argument("--distance-backend", choices=("dijkstra", "fmm"))
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {
        "experiment.seed": args.seed,
        "experiment.direction": args.direction,
        "experiment.reps": args.reps,
        "experiment.out": args.out,
        "experiment.distance_backend": args.distance_backend,
    }
    try:
        cfg = load_config(args.config, overrides)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        if args.command == "simulate":
            files = cmd_simulate(cfg)
        elif args.command == "filter":
            files = cmd_filter(cfg, workers=args.workers)
        elif args.command == "maps":
            files = cmd_maps(cfg)
        else:
            files = cmd_report(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingInputError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ResourceLimitError as exc:
        print(f"resource limit: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    for f in files:
        print(f)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
