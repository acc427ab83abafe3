"""Decision-threshold tuning and temperature scaling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax
from sklearn.model_selection import StratifiedKFold

METRICS = ("macro_f1", "f1", "accuracy")
T_MIN, T_MAX = 0.05, 20.0


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class ThresholdPolicy:
    metric: str
    threshold: float
    score: float
    tie_rule: str = "lower"

    def apply(self, probs) -> np.ndarray:
        return (np.asarray(probs) >= self.threshold).astype(int)


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)


def metric_from_counts(metric: str, tp, fp, fn, tn):
    if metric == "f1":
        return _f1(tp, fp, fn)
    if metric == "macro_f1":
        return (_f1(tp, fp, fn) + _f1(tn, fn, fp)) / 2
    if metric == "accuracy":
        return (tp + tn) / (tp + fp + fn + tn)
    raise ValueError(f"unknown metric {metric!r}")


def binary_metric(metric: str, y, pred) -> float:
    y, pred = np.asarray(y).astype(bool), np.asarray(pred).astype(bool)
    tp, fp = np.sum(pred & y), np.sum(pred & ~y)
    fn, tn = np.sum(~pred & y), np.sum(~pred & ~y)
    return float(metric_from_counts(metric, tp, fp, fn, tn))


def candidate_thresholds(probs) -> np.ndarray:
    u = np.unique(np.asarray(probs, dtype=float))
    return np.unique(np.concatenate([[0.0], (u[:-1] + u[1:]) / 2, [1.0]]))


def tune_threshold(probs, y, metric: str = "macro_f1") -> ThresholdPolicy:
    """Exact sweep; predicts positive when ``prob >= threshold``; ties go to the lower threshold."""
    probs = np.asarray(probs, dtype=float)
    y = np.asarray(y).astype(int)
    if len(np.unique(y)) < 2:
        raise UndefinedMetricError("threshold tuning needs both classes in y")
    cands = candidate_thresholds(probs)
    order = np.argsort(probs)
    sp, sy = probs[order], y[order]
    # rows with prob >= t are those from searchsorted(sp, t, 'left') onwards
    start = np.searchsorted(sp, cands, side="left")
    pos_suffix = np.concatenate([np.cumsum(sy[::-1])[::-1], [0]])
    n, n_pos = len(y), int(y.sum())
    tp = pos_suffix[start]
    predicted = n - start
    fp = predicted - tp
    fn = n_pos - tp
    tn = n - n_pos - fp
    scores = metric_from_counts(metric, tp, fp, fn, tn)
    best = int(np.argmax(scores))  # first max = lowest threshold
    return ThresholdPolicy(metric, float(cands[best]), float(scores[best]))


def tune_threshold_oof(x, y, fit_predict_proba, metric: str = "macro_f1", n_folds: int = 5, seed: int = 0):
    """Tune on out-of-fold positive-class probabilities.

    ``fit_predict_proba(x_train, y_train, x_eval)`` returns P(y=1) for ``x_eval``.
    Returns ``(policy, oof_probs)``.
    """
    x, y = np.asarray(x), np.asarray(y).astype(int)
    oof = np.zeros(len(y))
    folds = StratifiedKFold(n_splits=n_folds, shuffle=True, random_state=seed)
    for tr, ev in folds.split(x, y):
        oof[ev] = fit_predict_proba(x[tr], y[tr], x[ev])
    return tune_threshold(oof, y, metric), oof


# ---------------------------------------------------------------------------
# temperature


@dataclass(frozen=True)
class Temperature:
    t: float

    def __post_init__(self):
        if not T_MIN <= self.t <= T_MAX:
            raise ValueError(f"temperature {self.t} outside [{T_MIN}, {T_MAX}]")


def apply_temperature(logits, t: float) -> np.ndarray:
    if t <= 0:
        raise ValueError("temperature must be positive")
    return softmax(np.asarray(logits, dtype=float) / t, axis=-1)


def nll(logits, y, t: float) -> float:
    logits = np.asarray(logits, dtype=float)
    lp = log_softmax(logits / t, axis=-1)
    return float(-lp[np.arange(len(y)), np.asarray(y)].mean())


def _nll_slope(logits, y, t: float) -> float:
    # d/dt NLL = mean(z_y - E_p[z]) / t^2
    p = softmax(logits / t, axis=-1)
    zy = logits[np.arange(len(y)), y]
    return float(np.mean(zy - (p * logits).sum(-1)) / t**2)


def temperature_grid(n: int = 200) -> np.ndarray:
    return np.unique(np.concatenate([np.geomspace(T_MIN, T_MAX, n), [1.0]]))


def fit_temperature(logits, y, n_grid: int = 200, n_bisect: int = 30) -> Temperature:
    logits = np.asarray(logits, dtype=float)
    y = np.asarray(y).astype(int)
    if logits.ndim != 2 or logits.shape[0] < 2 or logits.shape[1] < 2:
        raise ValueError("need logits of shape [n >= 2, C >= 2]")
    grid = temperature_grid(n_grid)
    values = np.array([nll(logits, y, t) for t in grid])
    i = int(np.argmin(values))
    best_t, best_v = grid[i], values[i]
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    # NLL is quasi-convex in t: bisect on the sign of its slope inside the bracket
    for _ in range(n_bisect):
        mid = np.sqrt(lo * hi)
        if _nll_slope(logits, y, mid) >= 0:  # flat (underflowed) regions resolve toward lower t
            hi = mid
        else:
            lo = mid
    t_ref = float(np.sqrt(lo * hi))
    if nll(logits, y, t_ref) < best_v:
        best_t = t_ref
    return Temperature(float(best_t))
