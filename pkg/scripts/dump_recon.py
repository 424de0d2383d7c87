#!/usr/bin/env python3
"""Train one short glyph16 DSN and write its reconstruction grids, with and
without the private encoders.

Usage: python scripts/dump_recon.py [--out runs/recon] [--steps 1500]
"""
from __future__ import annotations

import argparse
from pathlib import Path

from dsnlab import cli
from dsnlab import experiments as X


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/recon")
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    cfg = out / "recon.cfg"
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_text(X.Entry("glyph16", "dsn", {"similarity": "dann"}).text(args.seed, args.steps))
    base = ["--config", str(cfg), "--out", str(out)]
    for argv in (["run"] + base, ["dump-recon"] + base, ["dump-recon", "--zero-private"] + base):
        code = cli.main(argv)
        if code:
            return code
    print(f"grids under {out / cli.load_config(cfg).run_id}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
