"""CATE estimation with T/S/X meta-learners, PEHE, and a confounded synthetic task generator."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from picotab.prior import SCM, NodeMechanism, mechanism_output, random_mechanism

PROPENSITY_CLIP = (0.01, 0.99)


class DegenerateArmError(ValueError):
    pass


class PropensityClampWarning(UserWarning):
    pass


@dataclass(frozen=True)
class OutcomeHeads:
    """Noise-free outcome surfaces: mu0 = base(x), mu1 = base(x) + effect(x)."""

    base: NodeMechanism
    effect: NodeMechanism
    base_scale: float
    effect_scale: float
    effect_shift: float

    def mu0(self, x: np.ndarray) -> np.ndarray:
        return self.base_scale * mechanism_output(self.base, x)

    def cate(self, x: np.ndarray) -> np.ndarray:
        return self.effect_scale * mechanism_output(self.effect, x) + self.effect_shift

    def mu1(self, x: np.ndarray) -> np.ndarray:
        return self.mu0(x) + self.cate(x)


@dataclass
class CausalDataset:
    x: np.ndarray
    t: np.ndarray
    y: np.ndarray
    true_cate: np.ndarray | None = None
    heads: OutcomeHeads | None = None
    propensity: np.ndarray | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t).astype(int)
        if not np.isin(self.t, (0, 1)).all():
            raise ValueError("treatment must be binary")


def _arms(data: CausalDataset, min_rows: int = 2):
    treated = data.t == 1
    if treated.sum() < min_rows or (~treated).sum() < min_rows:
        raise DegenerateArmError(f"each arm needs at least {min_rows} rows "
                                 f"(treated={int(treated.sum())}, control={int((~treated).sum())})")
    return treated


def _fit_predict(factory, x_fit, y_fit, x_eval, binary: bool = False) -> np.ndarray:
    model = factory()
    model.fit(x_fit, y_fit)
    if binary:
        return model.predict_proba(x_eval)[:, 1]
    return np.asarray(model.predict(x_eval), dtype=float)


def t_learner(data: CausalDataset, base: Callable, binary_outcome: bool = False) -> np.ndarray:
    treated = _arms(data)
    mu1 = _fit_predict(base, data.x[treated], data.y[treated], data.x, binary_outcome)
    mu0 = _fit_predict(base, data.x[~treated], data.y[~treated], data.x, binary_outcome)
    return mu1 - mu0


def s_learner(data: CausalDataset, base: Callable, binary_outcome: bool = False) -> np.ndarray:
    _arms(data)
    xt = np.column_stack([data.x, data.t])
    model = base()
    model.fit(xt, data.y)
    n = len(data.x)
    x1 = np.column_stack([data.x, np.ones(n)])
    x0 = np.column_stack([data.x, np.zeros(n)])
    if binary_outcome:
        return model.predict_proba(x1)[:, 1] - model.predict_proba(x0)[:, 1]
    return np.asarray(model.predict(x1), dtype=float) - np.asarray(model.predict(x0), dtype=float)


def x_learner(
    data: CausalDataset,
    base: Callable,
    propensity_base: Callable | None = None,
    propensity: np.ndarray | None = None,
) -> np.ndarray:
    """Imputed-effect learner with propensity-weighted combination.

    Pass a fixed ``propensity`` array to skip fitting ``propensity_base``.
    """
    treated = _arms(data)
    x1, y1 = data.x[treated], data.y[treated]
    x0, y0 = data.x[~treated], data.y[~treated]
    mu0_on_1 = _fit_predict(base, x0, y0, x1)
    mu1_on_0 = _fit_predict(base, x1, y1, x0)
    tau1 = _fit_predict(base, x1, y1 - mu0_on_1, data.x)
    tau0 = _fit_predict(base, x0, mu1_on_0 - y0, data.x)
    if propensity is None:
        if propensity_base is None:
            raise ValueError("need propensity_base or a fixed propensity")
        g = _fit_predict(propensity_base, data.x, data.t, data.x, binary=True)
    else:
        g = np.broadcast_to(np.asarray(propensity, dtype=float), tau0.shape)
    lo, hi = PROPENSITY_CLIP
    if ((g <= 0) | (g >= 1)).any():
        warnings.warn("propensity estimates outside (0, 1) were clamped", PropensityClampWarning, stacklevel=2)
    g = np.clip(g, lo, hi)
    return g * tau0 + (1 - g) * tau1


def constant_ate(data: CausalDataset) -> np.ndarray:
    """Difference of arm means, broadcast to every row."""
    treated = _arms(data, 1)
    return np.full(len(data.y), data.y[treated].mean() - data.y[~treated].mean())


def pehe(pred, truth) -> float:
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("pehe of empty vectors")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def make_confounded_task(
    scm: SCM,
    confounding_strength: float,
    seed: int,
    n: int = 400,
    treated_share: float = 0.5,
    noise_sd: tuple[float, float] = (0.1, 0.1),
    effect_size: float = 1.0,
) -> CausalDataset:
    """Covariates from ``scm``; treatment via a logistic score of the covariates.

    ``treated_share`` sets the intercept of the assignment model, ``noise_sd``
    gives the per-arm outcome noise (control, treated).
    """
    rng = np.random.default_rng(seed)
    x = scm.sample(n, rng)
    x = (x - x.mean(0)) / np.where(x.std(0) > 1e-12, x.std(0), 1.0)
    c = x.shape[1]
    cols = np.arange(c)
    w = rng.standard_normal(c)
    w /= np.linalg.norm(w)
    score = x @ w
    intercept = np.log(treated_share / (1 - treated_share))
    p = 1 / (1 + np.exp(-(intercept + confounding_strength * score)))
    t = (rng.random(n) < p).astype(int)

    base = random_mechanism(cols, (0.0, 0.0), rng)
    effect = random_mechanism(cols, (0.0, 0.0), rng)
    b_raw, e_raw = mechanism_output(base, x), mechanism_output(effect, x)
    heads = OutcomeHeads(
        base=base,
        effect=effect,
        base_scale=1.0 / max(b_raw.std(), 1e-12),
        effect_scale=effect_size / max(e_raw.std(), 1e-12),
        effect_shift=float(rng.normal(0.0, 0.5)),
    )
    mu0, mu1 = heads.mu0(x), heads.mu1(x)
    sd = np.where(t == 1, noise_sd[1], noise_sd[0])
    y = np.where(t == 1, mu1, mu0) + sd * rng.standard_normal(n)
    return CausalDataset(x=x, t=t, y=y, true_cate=mu1 - mu0, heads=heads, propensity=p)
