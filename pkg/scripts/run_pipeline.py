"""Run simulate, filter, maps and report for one or more configs.

    python scripts/run_pipeline.py configs/matched.ini --workers 4
"""
import argparse
import sys

from ecgipf.cli import main


def run(config, extra):
    for cmd in ("simulate", "filter", "maps", "report"):
        code = main([cmd, "--config", config, *extra])
        if code:
            return code
    return 0


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("configs", nargs="+")
    ap.add_argument("--workers", default="1")
    ap.add_argument("--seed")
    args = ap.parse_args()
    extra = ["--workers", args.workers] + (["--seed", args.seed] if args.seed else [])
    sys.exit(max(run(c, extra) for c in args.configs))
