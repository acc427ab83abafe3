"""Per-dataset min-max normalization, mean +- SEM aggregation and pairwise win rates."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOWER_IS_BETTER = {"rmse", "mse", "mae", "log_loss", "logloss", "nll", "error", "time"}


class UnderdeterminedError(ValueError):
    pass


@dataclass
class ResultTable:
    """scores[model][dataset]; higher is better. Missing pairs are simply absent."""

    scores: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def models(self) -> list[str]:
        return list(self.scores)

    @property
    def datasets(self) -> list[str]:
        seen = {}
        for per in self.scores.values():
            for d in per:
                seen.setdefault(d, None)
        return list(seen)

    def add(self, model: str, dataset: str, value: float) -> None:
        self.scores.setdefault(model, {})[dataset] = float(value)

    def matrix(self) -> np.ndarray:
        """[n_models, n_datasets] with NaN for missing entries."""
        ds = self.datasets
        return np.array([[self.scores[m].get(d, np.nan) for d in ds] for m in self.models])


def read_results(path) -> ResultTable:
    """Long-format CSV with columns model, dataset, metric, value."""
    table = ResultTable()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            value = float(row["value"])
            if row["metric"].strip().lower() in LOWER_IS_BETTER:
                value = -value
            table.add(row["model"].strip(), row["dataset"].strip(), value)
    return table


def normalize_scores(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    if s.size < 2:
        raise UnderdeterminedError("normalization needs at least two models")
    lo, hi = s.min(), s.max()
    if hi == lo:
        return np.full(s.shape, 0.5)
    return (s - lo) / (hi - lo)


def normalize_table(table: ResultTable) -> np.ndarray:
    """Normalize each dataset column over the models that scored it."""
    raw = table.matrix()
    out = np.full(raw.shape, np.nan)
    for j in range(raw.shape[1]):
        have = ~np.isnan(raw[:, j])
        out[have, j] = normalize_scores(raw[have, j])
    return out


@dataclass(frozen=True)
class Aggregate:
    model: str
    mean: float
    sem: float
    n_datasets: int


def aggregate(normalized: np.ndarray, models: list[str]) -> list[Aggregate]:
    out = []
    for m, row in zip(models, np.asarray(normalized, dtype=float)):
        vals = row[~np.isnan(row)]
        if len(vals) < 2:
            raise UnderdeterminedError(f"model {m!r} has fewer than two datasets")
        out.append(Aggregate(m, float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals))), len(vals)))
    return out


def win_rate_matrix(table: ResultTable) -> np.ndarray:
    """W[a, b] = share of common datasets where a beats b (ties 0.5); NaN if none in common."""
    raw = table.matrix()
    k = raw.shape[0]
    w = np.full((k, k), np.nan)
    for a in range(k):
        for b in range(k):
            common = ~np.isnan(raw[a]) & ~np.isnan(raw[b])
            if not common.any():
                continue
            ra, rb = raw[a, common], raw[b, common]
            w[a, b] = (np.sum(ra > rb) + 0.5 * np.sum(ra == rb)) / common.sum()
    return w


def write_aggregate(rows: list[Aggregate], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "mean_normalized", "sem", "n_datasets"])
        for r in rows:
            w.writerow([r.model, repr(r.mean), repr(r.sem), r.n_datasets])


def write_normalized(table: ResultTable, normalized: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "dataset", "metric", "value"])
        for i, m in enumerate(table.models):
            for j, d in enumerate(table.datasets):
                if not np.isnan(normalized[i, j]):
                    w.writerow([m, d, "normalized", repr(float(normalized[i, j]))])


def write_win_rates(models: list[str], w: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["model", "opponent", "metric", "value"])
        for i, a in enumerate(models):
            for j, b in enumerate(models):
                out.writerow([a, b, "win_rate", "" if np.isnan(w[i, j]) else repr(float(w[i, j]))])


def run_bench(results_path, out_dir) -> list[Aggregate]:
    table = read_results(results_path)
    norm = normalize_table(table)
    agg = aggregate(norm, table.models)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_normalized(table, norm, out_dir / "normalized.csv")
    write_aggregate(agg, out_dir / "aggregate.csv")
    write_win_rates(table.models, win_rate_matrix(table), out_dir / "win_rates.csv")
    return agg
