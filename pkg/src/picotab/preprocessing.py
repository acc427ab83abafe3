"""Per-estimator preprocessing: scalers, quantile maps, SVD side-features and recipes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

TRANSFORMS = ("robust_softclip", "quantile", "standard", "robust_softclip_svd")
SOFT_CLIP_BOUND = 4.0
MAX_SVD_COMPONENTS = 8
_EPS = 1e-12
_SIGN_TOL = 1e-6


class EmptyColumnError(ValueError):
    pass


def soft_clip(x, c: float = SOFT_CLIP_BOUND):
    if c <= 0:
        raise ValueError("soft clip bound must be positive")
    return c * np.tanh(np.asarray(x, dtype=float) / c)


def robust_params(column: np.ndarray) -> tuple[float, float]:
    """(center, scale) for robust scaling; scale 0 means 'emit zeros'."""
    obs = column[~np.isnan(column)]
    if obs.size == 0:
        raise EmptyColumnError("robust scaling needs at least one observed value")
    q1, med, q3 = np.percentile(obs, [25, 50, 75])
    iqr = q3 - q1
    if iqr >= _EPS:
        return float(med), float(iqr)
    sd = obs.std()
    return float(med), float(sd) if sd >= _EPS else 0.0


def _apply_center_scale(column, center, scale):
    if scale == 0.0:
        return np.where(np.isnan(column), np.nan, 0.0)
    return (column - center) / scale


def robust_scale(column: np.ndarray) -> np.ndarray:
    column = np.asarray(column, dtype=float)
    return _apply_center_scale(column, *robust_params(column))


def standard_params(column: np.ndarray) -> tuple[float, float]:
    obs = column[~np.isnan(column)]
    if obs.size == 0:
        raise EmptyColumnError("standard scaling needs at least one observed value")
    sd = obs.std()
    return float(obs.mean()), float(sd) if sd >= _EPS else 0.0


@dataclass(frozen=True)
class QuantileMap:
    """Train values -> normal scores via mid-ranks; test via interpolated train ECDF."""

    knots: np.ndarray  # sorted unique train values
    probs: np.ndarray  # (midrank + 0.5) / n at each knot
    n: int
    degenerate: bool = False

    @classmethod
    def fit(cls, train: np.ndarray) -> QuantileMap:
        obs = np.asarray(train, dtype=float)
        obs = obs[~np.isnan(obs)]
        uniq = np.unique(obs)
        if uniq.size < 2:
            return cls(knots=uniq, probs=np.full(uniq.size, 0.5), n=obs.size, degenerate=True)
        ranks = rankdata(obs, method="average") - 1.0
        order = np.argsort(obs, kind="stable")
        sorted_obs, sorted_ranks = obs[order], ranks[order]
        first = np.searchsorted(sorted_obs, uniq)
        return cls(knots=uniq, probs=(sorted_ranks[first] + 0.5) / obs.size, n=obs.size)

    def transform(self, column: np.ndarray) -> np.ndarray:
        column = np.asarray(column, dtype=float)
        if self.degenerate:
            return np.where(np.isnan(column), np.nan, 0.0)
        lo, hi = 0.5 / self.n, (self.n - 0.5) / self.n
        p = np.clip(np.interp(column, self.knots, self.probs), lo, hi)
        return np.where(np.isnan(column), np.nan, ndtri(p))


def quantile_transform(train_column, test_column) -> tuple[np.ndarray, np.ndarray, bool]:
    """Returns (train_out, test_out, degenerate_flag)."""
    qm = QuantileMap.fit(train_column)
    return qm.transform(train_column), qm.transform(test_column), qm.degenerate


@dataclass(frozen=True)
class SVDProjection:
    components: np.ndarray  # [k, c] top right singular vectors (rows orthonormal)
    scales: np.ndarray  # [k] train std of each raw projection
    truncated: bool  # True if fewer than the requested k were available

    @classmethod
    def fit(cls, x: np.ndarray, k: int) -> SVDProjection:
        if k > min(x.shape):
            raise ValueError(f"k={k} exceeds min(n, c)={min(x.shape)}")
        _, s, vt = np.linalg.svd(x, full_matrices=False)
        tol = s.max(initial=0.0) * max(x.shape) * np.finfo(float).eps
        rank = int((s > tol).sum())
        k_eff = min(k, rank)
        comps = vt[:k_eff]
        # sign convention: the first loading within tolerance of the largest magnitude is positive,
        # so row order cannot flip a component (equal-magnitude loadings are common after scaling)
        mag = np.abs(comps)
        near_max = mag >= mag.max(axis=1, keepdims=True, initial=0.0) - _SIGN_TOL
        pivot = comps[np.arange(k_eff), np.argmax(near_max, axis=1)]
        comps = comps * np.where(pivot < 0, -1.0, 1.0)[:, None]
        proj = x @ comps.T
        sd = proj.std(axis=0)
        sd[sd < _EPS] = 1.0
        return cls(components=comps, scales=sd, truncated=k_eff < k)

    def raw(self, x: np.ndarray) -> np.ndarray:
        return x @ self.components.T

    def transform(self, x: np.ndarray) -> np.ndarray:
        return self.raw(x) / self.scales


def svd_features(x: np.ndarray, k: int) -> tuple[np.ndarray, bool]:
    """Unit-variance projections onto the top-k right singular vectors; flag if truncated."""
    proj = SVDProjection.fit(np.asarray(x, dtype=float), k)
    return proj.transform(x), proj.truncated


@dataclass(frozen=True)
class FeatureSchema:
    n_features: int
    categorical: np.ndarray  # bool [c]
    n_categories: tuple[int, ...] = ()  # per column; 0 for numeric

    @classmethod
    def numeric(cls, n_features: int) -> FeatureSchema:
        return cls(n_features, np.zeros(n_features, dtype=bool), (0,) * n_features)


@dataclass(frozen=True)
class EstimatorRecipe:
    seed: int
    numeric_transform: str
    feature_permutation: np.ndarray
    feature_subset: np.ndarray
    class_label_permutation: np.ndarray | None = None
    svd_k: int = 0


def build_ensemble_configs(
    n_estimators: int,
    schema: FeatureSchema,
    master_seed: int,
    feature_cap: int = 500,
    n_classes: int = 0,
) -> list[EstimatorRecipe]:
    if n_estimators < 1:
        raise ValueError("n_estimators must be >= 1")
    c = schema.n_features
    seeds = np.random.SeedSequence(master_seed).generate_state(n_estimators)
    recipes = []
    for i in range(n_estimators):
        rng = np.random.default_rng(seeds[i])
        transform = TRANSFORMS[i % len(TRANSFORMS)]
        if c > feature_cap:
            subset = np.sort(rng.choice(c, size=feature_cap, replace=False))
        else:
            subset = np.arange(c)
        perm = rng.permutation(len(subset))
        label_perm = rng.permutation(n_classes) if n_classes >= 2 else None
        recipes.append(
            EstimatorRecipe(
                seed=int(seeds[i]),
                numeric_transform=transform,
                feature_permutation=perm,
                feature_subset=subset,
                class_label_permutation=label_perm,
                svd_k=MAX_SVD_COMPONENTS if transform.endswith("svd") else 0,
            )
        )
    return recipes


@dataclass
class Preprocessed:
    values: np.ndarray  # [n, c'] float, finite
    missing: np.ndarray  # [n, c'] float flags in {0, 1}
    notes: set = field(default_factory=set)


@dataclass(frozen=True)
class _ColumnState:
    code_map: np.ndarray | None  # categorical: original code -> shuffled code; reserved = len
    impute: float
    kind: str  # "robust_softclip" | "quantile" | "standard" | "empty"
    center: float = 0.0
    scale: float = 1.0
    qmap: QuantileMap | None = None


@dataclass(frozen=True)
class FittedRecipe:
    """A recipe with its train-only statistics; ``transform`` maps any rows of the same schema."""

    recipe: EstimatorRecipe
    columns: tuple[_ColumnState, ...]
    svd: SVDProjection | None
    svd_center: np.ndarray | None
    svd_scale: np.ndarray | None

    @property
    def n_outputs(self) -> int:
        return len(self.columns) + (0 if self.svd is None else self.svd.components.shape[0])

    def transform(self, x: np.ndarray) -> Preprocessed:
        x = np.asarray(x, dtype=float)
        order = self.recipe.feature_subset[self.recipe.feature_permutation]
        x = x[:, order]
        notes = set()
        out = np.empty_like(x)
        missing = np.isnan(x)
        for j, st in enumerate(self.columns):
            col = x[:, j]
            if st.code_map is not None:
                col, unseen = _map_codes(col, st.code_map)
                if unseen:
                    notes.add("unseen-category")
            col = np.where(np.isnan(col), st.impute, col)
            out[:, j] = _transform_column(col, st)
        if self.svd is not None:
            z = (out - self.svd_center) / self.svd_scale
            out = np.concatenate([out, self.svd.transform(z)], axis=1)
            missing = np.concatenate([missing, np.zeros((x.shape[0], self.svd.components.shape[0]), bool)], axis=1)
        return Preprocessed(values=out, missing=missing.astype(float), notes=notes)


def _map_codes(col, code_map):
    reserved = len(code_map)
    finite = ~np.isnan(col)
    codes = np.full(col.shape, np.nan)
    idx = col[finite].astype(np.int64)
    known = (idx >= 0) & (idx < reserved) & (col[finite] == idx)
    mapped = np.full(idx.shape, float(reserved))
    mapped[known] = code_map[idx[known]]
    codes[finite] = mapped
    return codes, bool((~known).any())


def _transform_column(col, st: _ColumnState):
    if st.kind == "empty":
        return np.zeros_like(col)
    if st.kind == "quantile":
        return st.qmap.transform(col)
    z = _apply_center_scale(col, st.center, st.scale)
    return soft_clip(z) if st.kind == "robust_softclip" else z


def fit_recipe(x_train: np.ndarray, schema: FeatureSchema, recipe: EstimatorRecipe) -> FittedRecipe:
    x_train = np.asarray(x_train, dtype=float)
    order = recipe.feature_subset[recipe.feature_permutation]
    x = x_train[:, order]
    rng = np.random.default_rng(recipe.seed)
    kind = "robust_softclip" if recipe.numeric_transform.startswith("robust") else recipe.numeric_transform
    states = []
    fitted_cols = np.empty_like(x)
    for j, src in enumerate(order):
        col = x[:, j]
        code_map = None
        if schema.categorical[src]:
            n_cat = schema.n_categories[src] if schema.n_categories else 0
            observed = col[~np.isnan(col)]
            n_cat = max(n_cat, int(observed.max()) + 1 if observed.size else 0)
            code_map = rng.permutation(n_cat).astype(float)
            col, _ = _map_codes(col, code_map)
        obs = col[~np.isnan(col)]
        if obs.size == 0:
            st = _ColumnState(code_map=code_map, impute=0.0, kind="empty")
        else:
            impute = float(np.median(obs))
            filled = np.where(np.isnan(col), impute, col)
            if kind == "quantile":
                st = _ColumnState(code_map, impute, kind, qmap=QuantileMap.fit(filled))
            elif kind == "standard":
                st = _ColumnState(code_map, impute, kind, *standard_params(filled))
            else:
                st = _ColumnState(code_map, impute, kind, *robust_params(filled))
        states.append(st)
        fitted_cols[:, j] = _transform_column(np.where(np.isnan(col), st.impute, col), st)

    svd = center = scale = None
    if recipe.svd_k > 0 and x.shape[1] >= 2:
        center = fitted_cols.mean(axis=0)
        scale = fitted_cols.std(axis=0)
        scale[scale < _EPS] = 1.0
        z = (fitted_cols - center) / scale
        k = min(recipe.svd_k, *z.shape)
        svd = SVDProjection.fit(z, k)
        if svd.components.shape[0] == 0:
            svd = center = scale = None
    return FittedRecipe(recipe=recipe, columns=tuple(states), svd=svd, svd_center=center, svd_scale=scale)


def apply_recipe(x_train, x_test, schema: FeatureSchema, recipe: EstimatorRecipe):
    """Fit on ``x_train`` only and transform both; returns (train, test, fitted)."""
    fitted = fit_recipe(x_train, schema, recipe)
    return fitted.transform(x_train), fitted.transform(x_test), fitted


# ---------------------------------------------------------------------------
# persistence: scalars go to the text header (exact), arrays to float32 tensors




def fitted_recipe_to_parts(fr: FittedRecipe, prefix: str) -> tuple[dict, dict]:
    r = fr.recipe
    header = {
        f"{prefix}seed": str(r.seed),
        f"{prefix}transform": r.numeric_transform,
        f"{prefix}svd_k": str(r.svd_k),
        f"{prefix}n_columns": str(len(fr.columns)),
    }
    tensors = {
        f"{prefix}feature_permutation": r.feature_permutation.astype(np.float32),
        f"{prefix}feature_subset": r.feature_subset.astype(np.float32),
    }
    if r.class_label_permutation is not None:
        tensors[f"{prefix}class_label_permutation"] = r.class_label_permutation.astype(np.float32)
    for j, st in enumerate(fr.columns):
        p = f"{prefix}col{j}."
        header[f"{p}state"] = ",".join([st.kind, repr(st.impute), repr(st.center), repr(st.scale)])
        if st.code_map is not None:
            tensors[f"{p}code_map"] = st.code_map.astype(np.float32)
        if st.qmap is not None:
            header[f"{p}qmap"] = f"{st.qmap.n},{int(st.qmap.degenerate)}"
            tensors[f"{p}knots"] = st.qmap.knots
            tensors[f"{p}probs"] = st.qmap.probs
    if fr.svd is not None:
        header[f"{prefix}svd_truncated"] = str(int(fr.svd.truncated))
        tensors[f"{prefix}svd_components"] = fr.svd.components
        tensors[f"{prefix}svd_scales"] = fr.svd.scales
        tensors[f"{prefix}svd_center"] = fr.svd_center
        tensors[f"{prefix}svd_scale"] = fr.svd_scale
    return header, tensors


def fitted_recipe_from_parts(header: dict, tensors: dict, prefix: str) -> FittedRecipe:
    def arr(name, dtype=float):
        return np.asarray(tensors[f"{prefix}{name}"], dtype=dtype)

    label_key = f"{prefix}class_label_permutation"
    recipe = EstimatorRecipe(
        seed=int(header[f"{prefix}seed"]),
        numeric_transform=header[f"{prefix}transform"],
        feature_permutation=arr("feature_permutation", np.int64),
        feature_subset=arr("feature_subset", np.int64),
        class_label_permutation=np.asarray(tensors[label_key], dtype=np.int64) if label_key in tensors else None,
        svd_k=int(header[f"{prefix}svd_k"]),
    )
    cols = []
    for j in range(int(header[f"{prefix}n_columns"])):
        p = f"{prefix}col{j}."
        kind, impute, center, scale = header[f"{p}state"].split(",")
        code_map = arr(f"col{j}.code_map") if f"{p}code_map" in tensors else None
        qmap = None
        if f"{p}qmap" in header:
            n, degenerate = header[f"{p}qmap"].split(",")
            qmap = QuantileMap(arr(f"col{j}.knots"), arr(f"col{j}.probs"), int(n), bool(int(degenerate)))
        cols.append(_ColumnState(code_map, float(impute), kind, float(center), float(scale), qmap))
    svd = center = scale = None
    if f"{prefix}svd_components" in tensors:
        svd = SVDProjection(arr("svd_components"), arr("svd_scales"), bool(int(header[f"{prefix}svd_truncated"])))
        center, scale = arr("svd_center"), arr("svd_scale")
    return FittedRecipe(recipe, tuple(cols), svd, center, scale)
