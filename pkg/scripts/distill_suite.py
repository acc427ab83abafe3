"""Teacher vs distilled student on held-out prior tasks, plus single-row latency.

    python scripts/distill_suite.py --tasks 20 --out results/distill
"""

import argparse
import csv
import time
from pathlib import Path

import numpy as np
import torch

from picotab.distill import DistillConfig, distill_mlp, distill_trees, generate_transfer_set, student_predict
from picotab.engine import FitOptions, default_model, fit, predict, predict_distribution
from picotab.model import load_model
from picotab.prior import task_suite
from picotab.train import desk_prior


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--model")
    ap.add_argument("--out", default="results/distill")
    ap.add_argument("--tasks", type=int, default=20)
    ap.add_argument("--seed", type=int, default=20_251)
    ap.add_argument("--latency-rows", type=int, default=10_000)
    args = ap.parse_args()
    torch.set_num_threads(1)
    model = load_model(args.model) if args.model else default_model()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for i, task in enumerate(task_suite(desk_prior(), args.seed, args.tasks, 600, n_rows=256, kind="classification")):
        perm = np.random.default_rng(0).permutation(task.n_rows)
        tr, te = perm[:179], perm[179:]
        teacher = fit(model, task.x[tr], task.y[tr], FitOptions(n_estimators=4, seed=i))
        transfer = generate_transfer_set(teacher, task.x[tr], r_aug=3, seed=i)
        acc = {"teacher": np.mean(predict(teacher, task.x[te]) == task.y[te])}
        for name, fn in (("mlp", distill_mlp), ("trees", distill_trees)):
            student = fn(teacher, transfer, DistillConfig(seed=i))
            acc[name] = np.mean(student_predict(student, task.x[te]).point() == task.y[te])
        rows.append((i, *(round(float(acc[k]), 4) for k in ("teacher", "mlp", "trees"))))
        print(*rows[-1], flush=True)
    with open(out / "accuracy.csv", "w", newline="") as fh:
        csv.writer(fh).writerows([("task", "teacher", "student_mlp", "student_trees"), *rows])
    gaps = np.array([r[1] - r[2] for r in rows])
    print(f"MLP within 5 points on {(gaps <= 0.05).sum()}/{len(rows)}; mean gap {gaps.mean() * 100:.2f} points")

    rng = np.random.default_rng(1)
    n = args.latency_rows
    x = rng.standard_normal((n + 1, 8))
    y = (x[:, 0] + x[:, 1] > 0).astype(int)
    big = fit(model, x[:n], y[:n], FitOptions(n_estimators=1))
    t0 = time.perf_counter()
    predict_distribution(big, x[n:])
    teacher_s = time.perf_counter() - t0
    small = fit(model, x[:500], y[:500], FitOptions(n_estimators=1))
    student = distill_mlp(small, generate_transfer_set(small, x[:500], r_aug=1), DistillConfig(epochs=20))
    lat = []
    for _ in range(200):
        t0 = time.perf_counter()
        student_predict(student, x[n:])
        lat.append(time.perf_counter() - t0)
    student_s = float(np.median(lat))
    print(f"single-row latency at {n} context rows: teacher {teacher_s:.2f}s, student {student_s * 1e6:.0f}us, "
          f"ratio {teacher_s / student_s:.0f}x")


if __name__ == "__main__":
    main()
