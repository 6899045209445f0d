#!/usr/bin/env python3
"""F1 over router depth and width on the default synthetic scenario.

    python scripts/sweep_model.py --run-root runs --plot-dir figures

Each grid point is its own run directory; the plots are F1 curves over layers
(1-4) and hidden width (64/128/256).
"""

from __future__ import annotations

import argparse
import sys

from kgroute.cli import main as cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--run-root", default="runs")
    ap.add_argument("--config", "-c")
    ap.add_argument("--plot-dir", default="figures")
    ap.add_argument("--grids", nargs="+", default=["layers", "hidden", "k"], choices=["layers", "hidden", "k"])
    args = ap.parse_args()
    base = ["--run-root", args.run_root] + (["-c", args.config] if args.config else [])
    for grid in args.grids:
        code = cli(["sweep", grid, "--plot", f"{args.plot_dir}/f1_{grid}.png", *base])
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
