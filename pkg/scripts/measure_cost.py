"""Time fit+predict over a (rows, cols) grid and fit the two-term cost model.

    python scripts/measure_cost.py --out results/cost

Writes grid.csv, cap.csv and test_scaling.csv, then prints the fitted
coefficients, the c=500 vs c=600 comparison and the per-test-row slopes.
"""

import argparse
import csv
import time
from pathlib import Path

import numpy as np
import torch

from picotab.engine import FitOptions, default_model, fit, fit_cost_model, predict_distribution
from picotab.model import load_model


def timed(fn, reps):
    best = np.inf
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--model")
    ap.add_argument("--out", default="results/cost")
    ap.add_argument("--rows", default="250,500,1000,2000")
    ap.add_argument("--cols", default="6,12,24,48")
    ap.add_argument("--reps", type=int, default=3)
    args = ap.parse_args()
    torch.set_num_threads(1)
    model = load_model(args.model) if args.model else default_model()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    opts = FitOptions(n_estimators=1)

    def run(r, m, n_test=100):
        x = rng.standard_normal((r + n_test, m))
        y = (x[:, 0] > 0).astype(int)
        return timed(lambda: predict_distribution(fit(model, x[:r], y[:r], opts), x[r:]), args.reps)

    grid = [(r, m, run(r, m)) for r in map(int, args.rows.split(",")) for m in map(int, args.cols.split(","))]
    rows, cols, secs = map(np.array, zip(*grid))
    alpha, beta, r2 = fit_cost_model(rows, cols, secs)
    with open(out / "grid.csv", "w", newline="") as fh:
        csv.writer(fh).writerows([("rows", "cols", "seconds"), *grid])
    print(f"alpha={alpha:.3e} beta={beta:.3e} R^2={r2:.4f}")

    cap = {c: min(run(100, c) for _ in range(args.reps)) for c in (500, 600)}
    with open(out / "cap.csv", "w", newline="") as fh:
        csv.writer(fh).writerows([("cols", "seconds"), *cap.items()])
    print(f"c=500 {cap[500]:.3f}s  c=600 {cap[600]:.3f}s  gap {abs(cap[600] - cap[500]) / cap[500]:.1%}")

    x = rng.standard_normal((1500, 10))
    fm = fit(model, x[:500], (x[:500, 0] > 0).astype(int), opts)
    tt = {n: timed(lambda n=n: predict_distribution(fm, x[500:500 + n]), args.reps) for n in (100, 500, 1000)}
    with open(out / "test_scaling.csv", "w", newline="") as fh:
        csv.writer(fh).writerows([("n_test", "seconds"), *tt.items()])
    s1, s2 = (tt[500] - tt[100]) / 400, (tt[1000] - tt[500]) / 500
    print(f"per-test-row slope {s1 * 1e3:.3f} vs {s2 * 1e3:.3f} ms  gap {abs(s2 - s1) / s1:.1%}")


if __name__ == "__main__":
    main()
