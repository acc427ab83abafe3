"""PEHE of meta-learners on confounded synthetic tasks with known effects.

    python scripts/causal_suite.py --tasks 10 --out results/causal
"""

import argparse
import csv
from pathlib import Path

import numpy as np
import torch
from sklearn.neighbors import KNeighborsRegressor

from picotab import causal
from picotab.engine import FitOptions, InContextClassifier, InContextRegressor, default_model
from picotab.model import load_model
from picotab.prior import PriorConfig, sample_scm


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--model")
    ap.add_argument("--out", default="results/causal")
    ap.add_argument("--tasks", type=int, default=10)
    ap.add_argument("--strength", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=20_251)
    args = ap.parse_args()
    torch.set_num_threads(1)
    model = load_model(args.model) if args.model else default_model()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = PriorConfig(max_features=5, dag_nodes_range=(4, 6))

    rows = []
    for s in range(args.tasks):
        d = causal.make_confounded_task(sample_scm(cfg, args.seed + s), args.strength, s, n=400)
        engine = lambda: InContextRegressor(model, FitOptions(seed=s))
        knn1 = lambda: KNeighborsRegressor(1)
        knn10 = lambda: KNeighborsRegressor(10)
        prop = lambda: InContextClassifier(model, FitOptions(seed=s))
        est = {
            "constant_ate": causal.constant_ate(d),
            "t_engine": causal.t_learner(d, engine),
            "s_engine": causal.s_learner(d, engine),
            "x_engine": causal.x_learner(d, engine, prop),
            "t_1nn": causal.t_learner(d, knn1),
            "t_10nn": causal.t_learner(d, knn10),
        }
        rows.append({"task": s, **{k: round(causal.pehe(v, d.true_cate), 4) for k, v in est.items()}})
        print(rows[-1], flush=True)
    with open(out / "pehe.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for key in rows[0]:
        if key != "task":
            print(f"{key:>13}: mean PEHE {np.mean([r[key] for r in rows]):.4f}")


if __name__ == "__main__":
    main()
