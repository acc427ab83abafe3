"""Surrogate-ranked hyperparameter search: sparse evaluated seed grid, dense surrogate ranking."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import qmc

log = logging.getLogger(__name__)


class ObjectiveBrokenError(RuntimeError):
    pass


@dataclass(frozen=True)
class Dimension:
    key: str
    kind: str  # "float" | "log_float" | "int" | "categorical"
    low: float = 0.0
    high: float = 1.0
    choices: tuple[str, ...] = ()

    @property
    def width(self) -> int:
        """Columns this dimension occupies in an encoded config vector."""
        return len(self.choices) if self.kind == "categorical" else 1

    def decode(self, u: float):
        """Map a unit-interval coordinate to a value."""
        if self.kind == "categorical":
            return self.choices[min(int(u * len(self.choices)), len(self.choices) - 1)]
        if self.kind == "log_float":
            return float(math.exp(math.log(self.low) + u * (math.log(self.high) - math.log(self.low))))
        if self.kind == "int":
            span = int(self.high) - int(self.low) + 1
            return int(self.low) + min(int(u * span), span - 1)
        return float(self.low + u * (self.high - self.low))

    def encode(self, value) -> list[float]:
        if self.kind == "categorical":
            return [1.0 if value == c else 0.0 for c in self.choices]
        if self.kind == "log_float":
            return [(math.log(value) - math.log(self.low)) / (math.log(self.high) - math.log(self.low))]
        return [(float(value) - self.low) / (self.high - self.low) if self.high > self.low else 0.0]

    def contains(self, value) -> bool:
        if self.kind == "categorical":
            return value in self.choices
        return self.low <= value <= self.high


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple[Dimension, ...]

    def decode(self, unit_row) -> dict:
        return {d.key: d.decode(u) for d, u in zip(self.dims, unit_row)}

    def encode(self, config: dict) -> np.ndarray:
        return np.array([v for d in self.dims for v in d.encode(config[d.key])])

    def contains(self, config: dict) -> bool:
        return all(d.contains(config[d.key]) for d in self.dims)

    @classmethod
    def from_file(cls, path) -> SearchSpace:
        """Lines ``key = kind low high`` or ``key = categorical a|b|c``; ``#`` comments."""
        dims = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, spec = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected 'key = kind ...'")
            parts = spec.split()
            kind = parts[0]
            if kind == "categorical":
                dims.append(Dimension(key.strip(), kind, choices=tuple(parts[1].split("|"))))
            elif kind in ("float", "log_float", "int"):
                dims.append(Dimension(key.strip(), kind, float(parts[1]), float(parts[2])))
            else:
                raise ValueError(f"{path}:{lineno}: unknown kind {kind!r}")
        return cls(tuple(dims))


@dataclass(frozen=True)
class HpoObservation:
    config: dict
    config_vector: np.ndarray
    score: float
    failed: bool = False


def evaluate_seed_grid(space: SearchSpace, n_seed: int, objective, seed: int = 0) -> list[HpoObservation]:
    """Latin-hypercube seed design; failed evaluations get the worst observed score."""
    if n_seed < 2:
        raise ValueError("n_seed must be >= 2")
    unit = qmc.LatinHypercube(d=len(space.dims), seed=np.random.default_rng(seed)).random(n_seed)
    configs = [space.decode(row) for row in unit]
    scores, failed = [], []
    for cfg in configs:
        try:
            value = float(objective(cfg))
            ok = math.isfinite(value)
        except Exception as exc:  # objective failures are data, not crashes
            log.warning("objective failed for %s: %s", cfg, exc)
            value, ok = float("nan"), False
        scores.append(value)
        failed.append(not ok)
    good = [s for s, f in zip(scores, failed) if not f]
    if not good:
        raise ObjectiveBrokenError("every seed-grid evaluation failed")
    worst = min(good)
    return [HpoObservation(cfg, space.encode(cfg), worst if f else s, f)
            for cfg, s, f in zip(configs, scores, failed)]


def config_hash(vector: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(vector, dtype=np.float64).tobytes()).hexdigest()


@dataclass
class RankedCandidates:
    configs: list[dict]
    vectors: np.ndarray
    predicted: np.ndarray
    constant_scores: bool = False


def sample_candidates(space: SearchSpace, n_candidates: int, seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    return [space.decode(row) for row in rng.random((n_candidates, len(space.dims)))]


def surrogate_rank(
    space: SearchSpace,
    observations: list[HpoObservation],
    n_candidates: int,
    top_m: int,
    surrogate_fit_predict,
    seed: int = 0,
    candidates: list[dict] | None = None,
) -> RankedCandidates:
    """Rank ``n_candidates`` random configs by surrogate-predicted score.

    ``surrogate_fit_predict(x_obs, y_obs, x_candidates)`` returns predicted
    scores (higher is better). Ties are ordered by config hash.
    """
    if len(observations) < 2:
        raise ValueError("need at least two observations")
    if candidates is None:
        candidates = sample_candidates(space, n_candidates, seed)
    vectors = np.stack([space.encode(c) for c in candidates])
    scores = np.array([o.score for o in observations])
    top_m = min(top_m, len(candidates))
    if np.ptp(scores) == 0:
        log.warning("all observed scores are equal; returning a random top_m")
        pick = np.random.default_rng(seed).choice(len(candidates), size=top_m, replace=False)
        return RankedCandidates([candidates[i] for i in pick], vectors[pick], np.full(top_m, scores[0]), True)
    x_obs = np.stack([o.config_vector for o in observations])
    predicted = np.asarray(surrogate_fit_predict(x_obs, scores, vectors), dtype=float)
    hashes = [config_hash(v) for v in vectors]
    order = sorted(range(len(candidates)), key=lambda i: (-predicted[i], hashes[i]))[:top_m]
    return RankedCandidates([candidates[i] for i in order], vectors[order], predicted[order])


def engine_surrogate(model=None, options=None):
    """Surrogate backed by the in-context regressor itself."""
    from picotab.engine import FitOptions, InContextRegressor

    def fit_predict(x_obs, y_obs, x_cand):
        reg = InContextRegressor(model, options or FitOptions(n_estimators=4, batch_size_test=2048))
        return reg.fit(x_obs, y_obs).predict(x_cand)

    return fit_predict
