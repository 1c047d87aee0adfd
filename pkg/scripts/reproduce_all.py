#!/usr/bin/env python3
"""Run every reference experiment with its shipped preset.

Writes artifacts under ./runs/<experiment>/ (or $DCPENSION_OUTDIR) and prints
one verdict line per check.  Exits non-zero if any verdict fails.
"""

import sys

from dcpension.cli import main

EXPERIMENTS = [
    "backward-pitfall",
    "forward-revisit",
    "power-showcase",
    "martingale",
    "spde",
]

if __name__ == "__main__":
    worst = 0
    for name in EXPERIMENTS:
        print(f"== {name} ==")
        worst = max(worst, main(["experiment", name, *sys.argv[1:]]))
    sys.exit(worst)
