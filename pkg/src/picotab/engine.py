"""Fit/predict over a preprocessing ensemble of the in-context transformer."""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import nnls

from picotab.io import Dataset
from picotab.model import (
    BinSpec,
    ContextCache,
    TabularTransformer,
    distribution_to_point,
    group_features,
    load_model,
    positional_vectors,
    standard_bin_spec,
)
from picotab.preprocessing import FeatureSchema, FittedRecipe, build_ensemble_configs, fit_recipe

RECOMMENDED_MAX_ROWS = 50_000
RECOMMENDED_MAX_FEATURES = 2_000
FEATURE_CAP = 500
KB = 1000
# fitted-model cache footprint of the full-scale classifier, per training cell
CACHE_KB_PER_CELL = {"device": 6.1, "host": 48.8}
REGRESSION_CACHE_FACTOR = 0.75
DEFAULT_MODEL_PATH = Path(__file__).parent / "data" / "desk.tpfn"


class DegenerateTargetError(ValueError):
    pass


class IncompatibleInputError(ValueError):
    pass


@dataclass(frozen=True)
class FitOptions:
    n_estimators: int = 8
    fit_mode: str = "lazy"  # "lazy" | "fit_with_cache"
    batch_size_test: int = 1024
    device_workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_estimators < 1 or self.batch_size_test < 1 or self.device_workers < 1:
            raise ValueError(f"invalid fit options {self}")
        if self.fit_mode not in ("lazy", "fit_with_cache"):
            raise ValueError(f"unknown fit_mode {self.fit_mode!r}")


@dataclass(frozen=True)
class EstimatorState:
    recipe: FittedRecipe
    groups_ctx: torch.Tensor
    y_ctx: torch.Tensor
    positions: torch.Tensor
    cache: ContextCache | None


@dataclass(frozen=True)
class FittedModel:
    model: TabularTransformer
    kind: str
    options: FitOptions
    schema: FeatureSchema
    estimators: tuple[EstimatorState, ...]
    n_train: int
    classes: np.ndarray | None = None
    bin_spec: BinSpec | None = None

    @property
    def has_cache(self) -> bool:
        return all(e.cache is not None for e in self.estimators)

    def cache_nbytes(self) -> int:
        return sum(e.cache.nbytes() for e in self.estimators if e.cache is not None)


@dataclass
class PredictiveDistribution:
    """Row-wise class probabilities, or bin probabilities plus their ``bin_spec``."""

    probs: np.ndarray
    kind: str
    classes: np.ndarray | None = None
    bin_spec: BinSpec | None = None
    notes: set = field(default_factory=set)

    def __len__(self) -> int:
        return self.probs.shape[0]

    def __getitem__(self, i):
        return PredictiveDistribution(self.probs[i], self.kind, self.classes, self.bin_spec)

    def point(self) -> np.ndarray:
        if self.kind == "classification":
            return self.classes[np.argmax(self.probs, axis=-1)]
        return distribution_to_point(self.probs, self.bin_spec)


def default_model() -> TabularTransformer:
    path = os.environ.get("PICOTAB_MODEL", DEFAULT_MODEL_PATH)
    return load_model(path)


def infer_kind(y: np.ndarray, max_classes: int) -> str:
    y = np.asarray(y, dtype=float)
    if np.all(y == np.round(y)) and len(np.unique(y)) <= max_classes:
        return "classification"
    return "regression"


def _as_schema(x: np.ndarray, categorical=None, n_categories=None) -> FeatureSchema:
    c = x.shape[1]
    cat = np.zeros(c, dtype=bool) if categorical is None else np.asarray(categorical, dtype=bool)
    if n_categories is None:
        n_categories = tuple(
            int(np.nanmax(x[:, j])) + 1 if cat[j] and not np.isnan(x[:, j]).all() else 0 for j in range(c)
        )
    return FeatureSchema(c, cat, tuple(n_categories))


def fit(
    model: TabularTransformer,
    x,
    y=None,
    options: FitOptions = FitOptions(),
    kind: str | None = None,
    categorical=None,
) -> FittedModel:
    if isinstance(x, Dataset):
        schema = FeatureSchema(x.x.shape[1], x.categorical, x.n_categories)
        y = x.y if y is None else y
        x = x.x
    else:
        x = np.asarray(x, dtype=float)
        schema = _as_schema(x, categorical)
    y = np.asarray(y)
    n, c = x.shape
    if n < 2:
        raise ValueError("need at least two training rows")
    if len(y) != n:
        raise IncompatibleInputError("x and y have different row counts")
    if n > RECOMMENDED_MAX_ROWS or c > RECOMMENDED_MAX_FEATURES:
        warnings.warn(f"{n} rows x {c} features exceeds the recommended maximum "
                      f"({RECOMMENDED_MAX_ROWS} x {RECOMMENDED_MAX_FEATURES}); proceeding", stacklevel=2)
    cfg = model.config
    kind = kind or infer_kind(y, cfg.max_classes)

    classes = bin_spec = None
    if kind == "classification":
        classes, y_enc = np.unique(y, return_inverse=True)
        if len(classes) < 2:
            raise DegenerateTargetError("classification target has a single class")
        if len(classes) > cfg.max_classes:
            raise ValueError(f"{len(classes)} classes exceed the model's max_classes={cfg.max_classes}")
        n_classes = len(classes)
    else:
        y_float = y.astype(float)
        if not np.isfinite(y_float).all():
            raise ValueError("regression targets must be finite")
        sd = y_float.std()
        bin_spec = standard_bin_spec(cfg.n_bins, y_float.mean(), sd if sd > 1e-12 else 1.0)
        n_classes = 0

    recipes = build_ensemble_configs(options.n_estimators, schema, options.seed, cfg.feature_cap, n_classes)
    states = []
    with torch.no_grad():
        for recipe in recipes:
            fitted = fit_recipe(x, schema, recipe)
            pre = fitted.transform(x)
            groups = group_features(torch.tensor(pre.values, dtype=torch.float32)[None],
                                    torch.tensor(pre.missing, dtype=torch.float32)[None], cfg.group_size)
            positions = positional_vectors(groups.shape[2], recipe.seed, cfg.pos_dim)
            if kind == "classification":
                y_ctx = torch.tensor(recipe.class_label_permutation[y_enc], dtype=torch.int64)[None]
            else:
                y_ctx = torch.tensor((y_float - bin_spec.y_mean) / bin_spec.y_std, dtype=torch.float32)[None]
            cache = model.build_cache(groups, y_ctx, kind, positions) if options.fit_mode == "fit_with_cache" else None
            states.append(EstimatorState(fitted, groups, y_ctx, positions, cache))
    return FittedModel(model=model, kind=kind, options=options, schema=schema, estimators=tuple(states),
                       n_train=n, classes=classes, bin_spec=bin_spec)


def _estimator_probs(fm: FittedModel, est: EstimatorState, x_batch: np.ndarray) -> tuple[np.ndarray, set]:
    cfg = fm.model.config
    pre = est.recipe.transform(x_batch)
    groups = group_features(torch.tensor(pre.values, dtype=torch.float32)[None],
                            torch.tensor(pre.missing, dtype=torch.float32)[None], cfg.group_size)
    with torch.no_grad():
        if est.cache is not None:
            logits = fm.model.forward_cached(groups, est.cache, chunk=cfg.test_chunk)
        else:
            logits = fm.model(est.groups_ctx, est.y_ctx, groups, fm.kind, est.positions, chunk=cfg.test_chunk)
    logits = logits[0].double()
    if fm.kind == "classification":
        perm = est.recipe.recipe.class_label_permutation
        probs = torch.softmax(logits[:, :len(perm)], dim=-1).numpy()
        return probs[:, perm], pre.notes
    return torch.softmax(logits, dim=-1).numpy(), pre.notes


def predict_distribution(fm: FittedModel, x_test) -> PredictiveDistribution:
    x_test = np.asarray(x_test.x if isinstance(x_test, Dataset) else x_test, dtype=float)
    if x_test.ndim != 2 or x_test.shape[1] != fm.schema.n_features:
        raise IncompatibleInputError(f"expected {fm.schema.n_features} feature columns, got shape {x_test.shape}")
    bs = fm.options.batch_size_test
    batches = [(s, x_test[s:s + bs]) for s in range(0, x_test.shape[0], bs)]
    jobs = [(e, s, xb) for e in fm.estimators for s, xb in batches]

    def run(job):
        est, _, xb = job
        return _estimator_probs(fm, est, xb)

    if fm.options.device_workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(fm.options.device_workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    width = len(fm.classes) if fm.kind == "classification" else fm.bin_spec.n_bins
    total = np.zeros((x_test.shape[0], width))
    notes = set()
    # fixed summation order keeps results independent of scheduling
    for (_, s, xb), (probs, nts) in zip(jobs, results):
        total[s:s + len(xb)] += probs
        notes |= nts
    probs = total / len(fm.estimators)
    probs /= probs.sum(axis=1, keepdims=True)
    return PredictiveDistribution(probs, fm.kind, fm.classes, fm.bin_spec, notes)


def predict(fm: FittedModel, x_test) -> np.ndarray:
    return predict_distribution(fm, x_test).point()


# ---------------------------------------------------------------------------
# memory and cost models


def estimate_cache_memory(n_rows: int, n_cols: int, kind: str, side: str) -> float:
    """Bytes of cached state for the full-scale model (KB = 1000 bytes)."""
    if n_rows < 0 or n_cols < 0:
        raise ValueError("sizes must be nonnegative")
    per_cell = CACHE_KB_PER_CELL[side] * KB
    if kind == "regression":
        per_cell *= REGRESSION_CACHE_FACTOR
    return n_rows * n_cols * per_cell


def measured_cache_bytes_per_cell(fm: FittedModel) -> float:
    """Cache bytes per training cell of this (desk-scale) fitted model."""
    if not fm.has_cache:
        raise ValueError("model was fitted without a cache")
    return fm.cache_nbytes() / (fm.n_train * fm.schema.n_features)


def predict_cost_model(n_rows, n_cols, alpha: float, beta: float):
    m = np.minimum(n_cols, FEATURE_CAP)
    r = np.asarray(n_rows, dtype=float)
    return alpha * r**2 * m + beta * r * m**2


def fit_cost_model(rows, cols, times) -> tuple[float, float, float]:
    """Nonnegative least squares for (alpha, beta); returns (alpha, beta, r_squared)."""
    rows, cols, times = (np.asarray(a, dtype=float) for a in (rows, cols, times))
    m = np.minimum(cols, FEATURE_CAP)
    design = np.column_stack([rows**2 * m, rows * m**2])
    scale = design.max(axis=0)
    coef, _ = nnls(design / scale, times)
    alpha, beta = coef / scale
    pred = predict_cost_model(rows, cols, alpha, beta)
    r2 = 1 - np.sum((times - pred) ** 2) / np.sum((times - times.mean()) ** 2)
    return float(alpha), float(beta), float(r2)


# ---------------------------------------------------------------------------
# estimator-style wrappers


class _Base:
    kind = ""

    def __init__(self, model: TabularTransformer | None = None, options: FitOptions = FitOptions(), categorical=None):
        self.model = model
        self.options = options
        self.categorical = categorical

    def fit(self, x, y):
        model = self.model if self.model is not None else default_model()
        self.fitted_ = fit(model, x, y, self.options, kind=self.kind, categorical=self.categorical)
        return self

    def predict(self, x):
        return predict(self.fitted_, x)


class InContextClassifier(_Base):
    kind = "classification"

    def predict_proba(self, x) -> np.ndarray:
        return predict_distribution(self.fitted_, x).probs

    @property
    def classes_(self):
        return self.fitted_.classes


class InContextRegressor(_Base):
    kind = "regression"
