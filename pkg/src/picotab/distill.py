"""Distill a fitted in-context ensemble into a dataset-specific MLP or tree ensemble."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.ensemble import GradientBoostingRegressor
from torch import nn

from picotab import io
from picotab.engine import FittedModel, PredictiveDistribution, predict_distribution
from picotab.preprocessing import FittedRecipe, fitted_recipe_from_parts, fitted_recipe_to_parts

LOG_FLOOR = 1e-6


class DistillationDivergedError(RuntimeError):
    def __init__(self, message: str, best_student: StudentModel | None):
        super().__init__(message)
        self.best_student = best_student


@dataclass
class TransferSet:
    x_aug: np.ndarray  # [(1 + r_aug) * n, c], original rows first
    soft_targets: np.ndarray
    augmented: np.ndarray  # bool provenance flag per row


def augment_rows(x: np.ndarray, n_new: int, rng: np.random.Generator, p_swap: float = 0.5) -> np.ndarray:
    """Rows drawn from ``x`` with each cell swapped, w.p. ``p_swap``, for the same column of another row."""
    n, c = x.shape
    base = x[rng.integers(n, size=n_new)]
    donors = x[rng.integers(n, size=(n_new, c)), np.arange(c)]
    return np.where(rng.random((n_new, c)) < p_swap, donors, base)


def generate_transfer_set(teacher: FittedModel, x_train, r_aug: float = 3.0, seed: int = 0) -> TransferSet:
    x = np.asarray(getattr(x_train, "x", x_train), dtype=float)
    n = x.shape[0]
    rng = np.random.default_rng(seed)
    extra = augment_rows(x, int(round(r_aug * n)), rng)
    x_all = np.concatenate([x, extra])
    dist = predict_distribution(teacher, x_all)
    return TransferSet(x_aug=x_all, soft_targets=dist.probs,
                       augmented=np.concatenate([np.zeros(n, bool), np.ones(len(extra), bool)]))


# ---------------------------------------------------------------------------
# students


@dataclass(frozen=True)
class DistillConfig:
    hidden: int = 256
    epochs: int = 300
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 1e-5
    patience: int = 20
    holdout: float = 0.1
    seed: int = 0
    tree_rounds: int = 100
    tree_depth: int = 3
    tree_lr: float = 0.1


@dataclass
class TreeArrays:
    left: np.ndarray
    right: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray  # float32, rounded down so that x32 <= t32 iff x32 <= t64
    value: np.ndarray

    def predict(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(len(x), dtype=np.int64)
        while True:
            internal = self.left[node] >= 0
            if not internal.any():
                return self.value[node]
            idx = np.flatnonzero(internal)
            nd = node[idx]
            go_left = x[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])


def _floor_float32(t: np.ndarray) -> np.ndarray:
    t32 = t.astype(np.float32)
    too_big = t32.astype(np.float64) > t
    t32[too_big] = np.nextafter(t32[too_big], np.float32(-np.inf))
    return t32


@dataclass
class TreeEnsemble:
    init: np.ndarray  # [C]
    learning_rate: float
    trees: list[list[TreeArrays]]  # per class, per round

    def decision(self, x: np.ndarray) -> np.ndarray:
        x32 = np.asarray(x, dtype=np.float32)
        out = np.tile(self.init, (len(x), 1)).astype(np.float64)
        for k, series in enumerate(self.trees):
            for tree in series:
                out[:, k] += self.learning_rate * tree.predict(x32)
        return out


class StudentMLP(nn.Module):
    def __init__(self, n_in: int, n_out: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(n_in, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(),
                                 nn.Linear(hidden, n_out))

    def forward(self, x):
        return self.net(x)


@dataclass
class StudentModel:
    kind: str  # "mlp" | "tree_ensemble"
    recipe: FittedRecipe
    n_features: int
    classes: np.ndarray
    mlp: StudentMLP | None = None
    trees: TreeEnsemble | None = None

    def features(self, x: np.ndarray) -> np.ndarray:
        pre = self.recipe.transform(x)
        return np.concatenate([pre.values, pre.missing], axis=1)

    def to_container(self) -> io.Container:
        header = {"kind": f"student_{self.kind}", "student.n_features": str(self.n_features),
                  "student.classes": ",".join(repr(float(c)) for c in self.classes)}
        h, tensors = fitted_recipe_to_parts(self.recipe, "recipe.")
        header.update(h)
        if self.mlp is not None:
            header["student.hidden"] = str(self.mlp.net[0].out_features)
            for k, v in self.mlp.state_dict().items():
                tensors[f"mlp.{k}"] = v.numpy()
        else:
            header["student.tree_lr"] = repr(self.trees.learning_rate)
            header["student.tree_init"] = ",".join(repr(float(v)) for v in self.trees.init)
            header["student.tree_rounds"] = str(len(self.trees.trees[0]))
            for k, series in enumerate(self.trees.trees):
                for r, t in enumerate(series):
                    p = f"tree.{k}.{r}."
                    tensors[p + "left"] = t.left.astype(np.float32)
                    tensors[p + "right"] = t.right.astype(np.float32)
                    tensors[p + "feature"] = t.feature.astype(np.float32)
                    tensors[p + "threshold"] = t.threshold
                    tensors[p + "value"] = t.value.astype(np.float32)
        return io.Container(header=header, tensors=tensors)

    @classmethod
    def from_container(cls, c: io.Container) -> StudentModel:
        kind = c.header.get("kind", "")
        if not kind.startswith("student_"):
            raise io.CheckpointFormatError(f"not a student checkpoint (kind={kind!r})")
        recipe = fitted_recipe_from_parts(c.header, c.tensors, "recipe.")
        classes = np.array([float(v) for v in c.header["student.classes"].split(",")])
        n_features = int(c.header["student.n_features"])
        if kind == "student_mlp":
            state = {k[4:]: torch.from_numpy(v.copy()) for k, v in c.tensors.items() if k.startswith("mlp.")}
            n_in = state["net.0.weight"].shape[1]
            mlp = StudentMLP(n_in, len(classes), int(c.header["student.hidden"]))
            mlp.load_state_dict(state)
            mlp.eval()
            return cls("mlp", recipe, n_features, classes, mlp=mlp)
        init = np.array([float(v) for v in c.header["student.tree_init"].split(",")])
        rounds = int(c.header["student.tree_rounds"])
        trees = []
        for k in range(len(init)):
            series = []
            for r in range(rounds):
                p = f"tree.{k}.{r}."
                series.append(TreeArrays(
                    left=c.tensors[p + "left"].astype(np.int64), right=c.tensors[p + "right"].astype(np.int64),
                    feature=c.tensors[p + "feature"].astype(np.int64), threshold=c.tensors[p + "threshold"],
                    value=c.tensors[p + "value"].astype(np.float64)))
            trees.append(series)
        return cls("tree_ensemble", recipe, n_features, classes,
                   trees=TreeEnsemble(init, float(c.header["student.tree_lr"]), trees))


def _teacher_recipe(teacher: FittedModel) -> FittedRecipe:
    if teacher.kind != "classification":
        raise ValueError("students are classification-only")
    return teacher.estimators[0].recipe


def distill_mlp(teacher: FittedModel, transfer: TransferSet, config: DistillConfig = DistillConfig()) -> StudentModel:
    """Fit a 2-hidden-layer MLP to the teacher's soft targets (KL), early-stopped on a holdout."""
    if len(transfer.x_aug) == 0:
        raise ValueError("empty transfer set")
    recipe = _teacher_recipe(teacher)
    student = StudentModel("mlp", recipe, teacher.schema.n_features, teacher.classes)
    feats = torch.tensor(student.features(transfer.x_aug), dtype=torch.float32)
    targets = torch.tensor(transfer.soft_targets, dtype=torch.float32)
    gen = torch.Generator().manual_seed(config.seed)
    torch.manual_seed(config.seed)
    order = torch.randperm(len(feats), generator=gen)
    n_hold = max(1, int(config.holdout * len(feats)))
    hold, fit_idx = order[:n_hold], order[n_hold:] if len(feats) > n_hold else order
    mlp = StudentMLP(feats.shape[1], targets.shape[1], config.hidden)
    opt = torch.optim.Adam(mlp.parameters(), lr=config.lr, weight_decay=config.weight_decay)

    def kl(idx):
        logq = torch.log_softmax(mlp(feats[idx]), dim=-1)
        p = targets[idx]
        return (torch.xlogy(p, p) - p * logq).sum(-1).mean()

    best, best_state, stale = float("inf"), None, 0
    for _ in range(config.epochs):
        mlp.train()
        perm = fit_idx[torch.randperm(len(fit_idx), generator=gen)]
        for start in range(0, len(perm), config.batch_size):
            value = kl(perm[start:start + config.batch_size])
            if not torch.isfinite(value):
                if best_state is not None:
                    mlp.load_state_dict(best_state)
                student.mlp = mlp.eval() if best_state is not None else None
                raise DistillationDivergedError("student loss became non-finite", student if best_state else None)
            opt.zero_grad()
            value.backward()
            opt.step()
        mlp.eval()
        with torch.no_grad():
            held = kl(hold).item()
        if held < best - 1e-7:
            best, best_state, stale = held, copy.deepcopy(mlp.state_dict()), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    mlp.load_state_dict(best_state)
    student.mlp = mlp.eval()
    return student


def distill_trees(teacher: FittedModel, transfer: TransferSet, config: DistillConfig = DistillConfig()) -> StudentModel:
    """Gradient-boosted regression trees on per-class teacher log-probabilities."""
    recipe = _teacher_recipe(teacher)
    student = StudentModel("tree_ensemble", recipe, teacher.schema.n_features, teacher.classes)
    feats = student.features(transfer.x_aug).astype(np.float32)
    logp = np.log(np.clip(transfer.soft_targets, LOG_FLOOR, None))
    inits, series = [], []
    for k in range(logp.shape[1]):
        gbr = GradientBoostingRegressor(n_estimators=config.tree_rounds, max_depth=config.tree_depth,
                                        learning_rate=config.tree_lr, random_state=config.seed)
        gbr.fit(feats, logp[:, k])
        inits.append(float(np.asarray(gbr.init_.constant_).ravel()[0]))
        trees = []
        for est in gbr.estimators_[:, 0]:
            t = est.tree_
            trees.append(TreeArrays(left=t.children_left.astype(np.int64), right=t.children_right.astype(np.int64),
                                    feature=np.maximum(t.feature, 0).astype(np.int64),
                                    threshold=_floor_float32(t.threshold),
                                    value=t.value[:, 0, 0].astype(np.float32).astype(np.float64)))  # as stored
        series.append(trees)
    student.trees = TreeEnsemble(np.array(inits), config.tree_lr, series)
    return student


def student_predict(student: StudentModel, x) -> PredictiveDistribution:
    x = np.asarray(getattr(x, "x", x), dtype=float)
    if x.ndim == 1:
        x = x[None]
    if x.shape[1] != student.n_features:
        raise ValueError(f"expected {student.n_features} features, got {x.shape[1]}")
    feats = student.features(x)
    if student.kind == "mlp":
        with torch.no_grad():
            probs = torch.softmax(student.mlp(torch.tensor(feats, dtype=torch.float32)).double(), dim=-1).numpy()
    else:
        z = student.trees.decision(feats)
        z -= z.max(axis=1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=1, keepdims=True)
    return PredictiveDistribution(probs, "classification", student.classes)


def load_student(path) -> StudentModel:
    return StudentModel.from_container(io.load_checkpoint(path))
