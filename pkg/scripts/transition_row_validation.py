"""Calibration of the transition-row check: empirical miss rate of the 99%
Clopper-Pearson bands over many seeds of the 50-pair experiment.

A correct kernel gives a per-band miss rate of at most ~1%; a single seed of
50 bands therefore fails with sizeable probability even when nothing is wrong.

    python scripts/transition_row_validation.py --seeds 40
"""
import argparse

import numpy as np
from scipy.stats import beta

from stochabs.experiments import room_abstraction


def run_seed(model, grid, inputs, mdp, seed, pairs=50, n=100_000, p_min=0.01):
    rng = np.random.default_rng(seed)
    checked = misses = 0
    for _ in range(pairs):
        s = int(rng.integers(grid.n_cells))
        j = int(rng.integers(len(inputs)))
        mean = model.mean(grid.representatives[s][None, :], inputs[j][None, :])
        xs = mean + model.R * rng.standard_normal((n, model.state_dim))
        hits = np.bincount(grid.index(xs), minlength=grid.n_cells + 1)
        for cell, p in mdp.row(s, j).items():
            if p < p_min:
                continue
            k = int(hits[cell])
            lo = beta.ppf(0.005, k, n - k + 1) if k else 0.0
            hi = beta.ppf(0.995, k + 1, n - k) if k < n else 1.0
            checked += 1
            misses += not (lo <= p <= hi)
    return checked, misses


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=40)
    ap.add_argument("--cells", type=int, default=400)
    ap.add_argument("--p-min", type=float, default=0.01)
    args = ap.parse_args()
    model, grid, inputs, mdp = room_abstraction(cells=args.cells)
    total = bad = failing = 0
    for seed in range(args.seeds):
        c, m = run_seed(model, grid, inputs, mdp, seed, p_min=args.p_min)
        total, bad, failing = total + c, bad + m, failing + (m > 0)
        print(f"seed {seed:3d}: {c} bands, {m} misses")
    print(f"miss rate {bad}/{total} = {bad / max(total, 1):.4f}; "
          f"{failing}/{args.seeds} seeds with at least one miss")


if __name__ == "__main__":
    main()
