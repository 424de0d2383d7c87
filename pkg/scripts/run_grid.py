#!/usr/bin/env python3
"""Run the glyph16 comparison, the ablations and the pose pair over three
seeds, then write the results table.

Usage: python scripts/run_grid.py [--out runs/grid] [--only comparison,pose]

Finished runs are skipped, so an interrupted grid picks up where it stopped.
"""
from __future__ import annotations

import argparse
import time

from dsnlab import cli
from dsnlab import experiments as X

GROUPS = {"comparison": X.COMPARISON, "ablation": X.ABLATION, "pose": X.POSE}


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/grid")
    ap.add_argument("--only", default=",".join(GROUPS), help="comma-separated subset of " + ", ".join(GROUPS))
    ap.add_argument("--verbose", action="store_true")
    args = ap.parse_args()
    for group in args.only.split(","):
        t0 = time.perf_counter()
        X.run_grid(args.out, GROUPS[group], quiet=not args.verbose)
        print(f"{group}: {time.perf_counter() - t0:.0f} s")
    return cli.main(["table", "--out", args.out])


if __name__ == "__main__":
    raise SystemExit(main())
