#!/usr/bin/env python3
"""Strong-convergence study of the Euler route against an exact benchmark.

Simulates the salary process (a geometric Brownian motion with piecewise
constant coefficients) with the Euler scheme at successively halved step
sizes and measures the terminal RMS error against the exact stochastic
exponential on the same Brownian increments.  The error ratio between
refinements should sit near 1/sqrt(2) ~ 0.71, the strong order-1/2 signature
of the scheme.

Usage: python3 scripts/convergence_study.py [paths] [seed]
"""

import math
import sys

import numpy as np

from dcpension import NoiseBlock, TimeGrid, stream_for_path
from dcpension.config import preset_config, build_settings

PATHS = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
SEED = int(sys.argv[2]) if len(sys.argv) > 2 else 20240601
HORIZON = 5.0
LEVELS = [64, 128, 256, 512]


def terminal_errors(params, steps_per_year: int) -> np.ndarray:
    grid = TimeGrid.from_rate(0.0, HORIZON, steps_per_year)
    noise = NoiseBlock.from_seed(SEED, grid, PATHS, params.n_assets, params.n_extra)
    h = grid.dt
    c = None
    y_exact = np.full(PATHS, params.initial_salary)
    y_euler = y_exact.copy()
    from dcpension import coefficients_at

    for k, t in enumerate(grid.times()[:-1]):
        c = coefficients_at(params, t)
        load1, load2 = c.salary_vol_hedgeable, c.salary_vol_unhedgeable
        gross = c.rate + c.salary_growth
        shock = noise.dB1[:, k, :] @ load1 + noise.dB2[:, k, :] @ load2
        s2 = float(load1 @ load1 + load2 @ load2)
        y_exact = y_exact * np.exp((gross - 0.5 * s2) * h + shock)
        y_euler = y_euler * (1.0 + gross * h + shock)
    return y_euler - y_exact


def main() -> int:
    params = build_settings(preset_config("backward-pitfall")).params
    print(f"paths={PATHS} seed={SEED} horizon={HORIZON}")
    print(f"{'steps/yr':>9} {'rms error':>12} {'ratio':>7}")
    prev = None
    for spy in LEVELS:
        err = terminal_errors(params, spy)
        rms = math.sqrt(float(np.mean(err ** 2)))
        ratio = f"{rms / prev:7.3f}" if prev else "      -"
        print(f"{spy:9d} {rms:12.3e} {ratio}")
        prev = rms
    return 0


if __name__ == "__main__":
    sys.exit(main())
