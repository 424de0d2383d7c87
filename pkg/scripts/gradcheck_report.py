#!/usr/bin/env python3
"""Print the per-trial finite-difference errors of every loss, worst first.

A finer view than ``dsnlab gradcheck``, which only reports the worst trial.
"""
from __future__ import annotations

import sys

from dsnlab import gradcheck as G


def main(trials: int = 20) -> int:
    rows = [(err, name, t) for t in range(trials) for name, err in G.check_trial(t).items()]
    rows.sort(reverse=True)
    for err, name, t in rows[:15]:
        print(f"{name:<12} trial {t:>2}  {err:.3e}  {'ok' if err < G.LOSS_THRESHOLD else 'FAIL'}")
    return 0 if rows[0][0] < G.LOSS_THRESHOLD else 3


if __name__ == "__main__":
    raise SystemExit(main(int(sys.argv[1]) if len(sys.argv) > 1 else 20))
