"""Score the in-context engine and sklearn baselines on held-out prior tasks, then aggregate.

    python scripts/bench_suite.py --tasks 20 --out results/bench

Writes results.csv in the bench input schema and runs the bench subcommand on it.
"""

import argparse
import csv
from pathlib import Path

import numpy as np
import torch
from sklearn.ensemble import HistGradientBoostingClassifier, RandomForestClassifier
from sklearn.impute import SimpleImputer
from sklearn.linear_model import LogisticRegression
from sklearn.neighbors import KNeighborsClassifier
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from picotab.cli import dispatch
from picotab.engine import FitOptions, InContextClassifier, default_model
from picotab.model import load_model
from picotab.prior import task_suite
from picotab.train import desk_prior


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--model")
    ap.add_argument("--out", default="results/bench")
    ap.add_argument("--tasks", type=int, default=20)
    ap.add_argument("--seed", type=int, default=20_251)
    args = ap.parse_args()
    torch.set_num_threads(1)
    model = load_model(args.model) if args.model else default_model()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    prep = lambda est: make_pipeline(SimpleImputer(strategy="median"), StandardScaler(), est)
    makers = {
        "picotab": lambda i: InContextClassifier(model, FitOptions(seed=i)),
        "logreg": lambda i: prep(LogisticRegression(max_iter=1000)),
        "knn1": lambda i: prep(KNeighborsClassifier(1)),
        "random_forest": lambda i: prep(RandomForestClassifier(200, random_state=i)),
        "hist_gbm": lambda i: HistGradientBoostingClassifier(random_state=i),
    }
    lines = []
    for i, task in enumerate(task_suite(desk_prior(), args.seed, args.tasks, 800, n_rows=256, kind="classification")):
        perm = np.random.default_rng(i).permutation(task.n_rows)
        tr, te = perm[:179], perm[179:]
        for name, make in makers.items():
            pred = make(i).fit(task.x[tr], task.y[tr]).predict(task.x[te])
            lines.append((name, f"task{i:03d}", "accuracy", repr(float(np.mean(pred == task.y[te])))))
        print(f"task {i} done", flush=True)
    with open(out / "results.csv", "w", newline="") as fh:
        csv.writer(fh).writerows([("model", "dataset", "metric", "value"), *lines])
    raise SystemExit(dispatch(["bench", "--results", str(out / "results.csv"), "--out", str(out)]))


if __name__ == "__main__":
    main()
