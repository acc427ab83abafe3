"""Synthetic task prior: random structural causal models and the tasks drawn from them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "monotone", "step")


class DegeneratePriorError(RuntimeError):
    """Raised when an SCM keeps producing a constant or single-class target."""


@dataclass(frozen=True)
class CorruptionRates:
    missing: float = 0.0
    outlier: float = 0.0
    categorize: float = 0.0


@dataclass(frozen=True)
class PriorConfig:
    max_rows: int = 256
    max_features: int = 12
    max_classes: int = 10
    dag_nodes_range: tuple[int, int] = (3, 16)
    edge_density: float = 0.35
    noise_scale_range: tuple[float, float] = (0.02, 0.4)
    task_mix: tuple[float, float] = (0.7, 0.3)
    corruption_rates: CorruptionRates = field(default_factory=CorruptionRates)
    min_rows: int = 16

    def __post_init__(self):
        lo, hi = self.dag_nodes_range
        if not 1 <= lo <= hi:
            raise ValueError(f"dag_nodes_range must satisfy 1 <= min <= max, got {self.dag_nodes_range}")
        lo, hi = self.noise_scale_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad noise_scale_range {self.noise_scale_range}")
        if not 1 <= self.min_rows <= self.max_rows:
            raise ValueError("need 1 <= min_rows <= max_rows")
        if self.max_features < 1 or self.max_classes < 2:
            raise ValueError("need max_features >= 1 and max_classes >= 2")
        probs = [self.edge_density, *self.task_mix, self.corruption_rates.missing,
                 self.corruption_rates.outlier, self.corruption_rates.categorize]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("probabilities must lie in [0, 1]")
        if abs(sum(self.task_mix) - 1.0) > 1e-9:
            raise ValueError(f"task_mix must sum to 1, got {self.task_mix}")


@dataclass(frozen=True)
class NodeMechanism:
    parents: np.ndarray  # int indices, all < node index
    activation: str
    w_in: np.ndarray  # [hidden, n_parents]
    b_in: np.ndarray  # [hidden]
    w_out: np.ndarray  # [hidden]
    noise_scale: float
    thresholds: np.ndarray  # used by the step activation only
    power: float  # used by the monotone activation only


@dataclass(frozen=True)
class SCM:
    """Random DAG over nodes 0..n-1 (index order is a topological order)."""

    n_nodes: int
    adjacency: np.ndarray  # bool [n, n], adjacency[i, j] means i -> j
    nodes: tuple[NodeMechanism, ...]
    root_kinds: tuple[str, ...]

    @property
    def n_edges(self) -> int:
        return int(self.adjacency.sum())

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Ancestral sampling of ``n`` joint draws, returns [n, n_nodes]."""
        values = np.zeros((n, self.n_nodes))
        for j, node in enumerate(self.nodes):
            noise = rng.standard_normal(n)
            if len(node.parents) == 0:
                values[:, j] = _root_draw(self.root_kinds[j], n, rng)
                continue
            signal = mechanism_output(node, values[:, node.parents])
            sd = signal.std()
            if sd > 1e-12:
                signal = (signal - signal.mean()) / sd
            else:
                signal = signal - signal.mean()
            values[:, j] = signal + node.noise_scale * noise
        return values


def _root_draw(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "uniform":
        return rng.uniform(-np.sqrt(3), np.sqrt(3), n)
    if kind == "laplace":
        return rng.laplace(0.0, 1 / np.sqrt(2), n)
    return rng.standard_normal(n)


def _activate(node: NodeMechanism, z: np.ndarray) -> np.ndarray:
    if node.activation == "tanh":
        return np.tanh(z)
    if node.activation == "monotone":
        return np.sign(z) * np.abs(z) ** node.power
    # piecewise-constant: number of thresholds exceeded
    return (z[..., None] > node.thresholds).sum(-1).astype(float)


def mechanism_output(node: NodeMechanism, parent_values: np.ndarray) -> np.ndarray:
    """Noise-free mechanism of a non-root node given [n, n_parents] inputs."""
    hidden = _activate(node, parent_values @ node.w_in.T + node.b_in)
    return hidden @ node.w_out


def random_mechanism(parents: np.ndarray, noise_scale_range, rng: np.random.Generator) -> NodeMechanism:
    n_par = len(parents)
    hidden = int(rng.integers(1, 5))
    lo, hi = noise_scale_range
    return NodeMechanism(
        parents=parents,
        activation=ACTIVATIONS[int(rng.integers(len(ACTIVATIONS)))],
        w_in=rng.standard_normal((hidden, n_par)) / np.sqrt(max(n_par, 1)),
        b_in=0.5 * rng.standard_normal(hidden),
        w_out=rng.standard_normal(hidden) / np.sqrt(hidden),
        noise_scale=float(rng.uniform(lo, hi)),
        thresholds=np.sort(rng.standard_normal(3)),
        power=float(rng.uniform(0.5, 1.5)),
    )


def sample_scm(config: PriorConfig, seed: int) -> SCM:
    rng = np.random.default_rng(seed)
    lo, hi = config.dag_nodes_range
    n = int(rng.integers(lo, hi + 1))
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    adjacency = upper & (rng.random((n, n)) < config.edge_density)
    nodes = []
    for j in range(n):
        parents = np.flatnonzero(adjacency[:, j])
        nodes.append(random_mechanism(parents, config.noise_scale_range, rng))
    root_kinds = tuple(str(k) for k in rng.choice(["normal", "uniform", "laplace"], size=n))
    return SCM(n_nodes=n, adjacency=adjacency, nodes=tuple(nodes), root_kinds=root_kinds)


@dataclass
class SyntheticTask:
    x: np.ndarray  # [n, c] float, NaN where missing
    missing: np.ndarray  # bool [n, c]
    y: np.ndarray
    kind: str  # "classification" | "regression"
    n_classes: int
    seed: int
    categorical: np.ndarray = None  # bool [c]

    def __post_init__(self):
        if self.categorical is None:
            self.categorical = np.zeros(self.x.shape[1], dtype=bool)

    @property
    def n_rows(self) -> int:
        return self.x.shape[0]

    @property
    def n_features(self) -> int:
        return self.x.shape[1]


def rank_bin(target: np.ndarray, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Bin a continuous target into classes with Dirichlet-random bin masses.

    Empty bins (possible with tied values) are dropped and labels compacted.
    """
    masses = rng.dirichlet(np.full(n_classes, 2.0))
    cuts = np.quantile(target, np.cumsum(masses)[:-1])
    labels = np.searchsorted(cuts, target, side="right")
    present = np.unique(labels)
    return np.searchsorted(present, labels)


def materialize_task(
    scm: SCM,
    config: PriorConfig,
    seed: int,
    n_rows: int | None = None,
    kind: str | None = None,
    max_retries: int = 10,
) -> SyntheticTask:
    if scm.n_nodes < 2:
        raise DegeneratePriorError("an SCM needs at least two nodes to yield features and a target")
    rng = np.random.default_rng(seed)
    n = n_rows if n_rows is not None else int(rng.integers(config.min_rows, config.max_rows + 1))
    n = min(n, config.max_rows)
    if kind is None:
        kind = "classification" if rng.random() < config.task_mix[0] else "regression"

    has_parents = [j for j, nd in enumerate(scm.nodes) if len(nd.parents) > 0]
    for _ in range(max_retries + 1):
        values = scm.sample(n, rng)
        target = int(rng.choice(has_parents)) if has_parents else int(rng.integers(scm.n_nodes))
        others = np.array([j for j in range(scm.n_nodes) if j != target])
        c = int(rng.integers(1, min(config.max_features, len(others)) + 1))
        cols = rng.choice(others, size=c, replace=False)
        t = values[:, target]
        if np.ptp(t) < 1e-12:
            continue
        x = values[:, cols]
        if kind == "regression":
            y = (t - t.mean()) / t.std()
            return SyntheticTask(x=x, missing=np.zeros(x.shape, dtype=bool), y=y,
                                 kind=kind, n_classes=0, seed=seed)
        k = int(rng.integers(2, config.max_classes + 1))
        labels = rank_bin(t, k, rng)
        k_obs = int(labels.max()) + 1
        if k_obs < 2:
            continue
        labels = rng.permutation(k_obs)[labels]
        return SyntheticTask(x=x, missing=np.zeros(x.shape, dtype=bool), y=labels.astype(np.int64),
                             kind=kind, n_classes=k_obs, seed=seed)
    raise DegeneratePriorError(f"degenerate target after {max_retries} retries (seed={seed})")


def apply_corruptions(task: SyntheticTask, config: PriorConfig, seed: int) -> SyntheticTask:
    rates = config.corruption_rates
    if rates.missing == 0 and rates.outlier == 0 and rates.categorize == 0:
        return task
    rng = np.random.default_rng(seed)
    x = task.x.copy()
    n, c = x.shape
    categorical = task.categorical.copy()

    to_cat = rng.random(c) < rates.categorize
    for j in np.flatnonzero(to_cat & ~categorical):
        col = x[:, j]
        n_levels = int(rng.integers(2, 8))
        cuts = np.quantile(col[np.isfinite(col)], np.sort(rng.random(n_levels - 1)))
        codes = rng.permutation(n_levels)[np.searchsorted(cuts, col)]
        x[:, j] = codes
        categorical[j] = True

    outliers = (rng.random((n, c)) < rates.outlier) & ~categorical[None, :]
    # heavy-tailed multiplicative factor, |factor| >= 1
    factor = 1.0 + np.abs(rng.standard_cauchy((n, c))) * 10.0
    x = np.where(outliers, x * factor, x)

    missing = task.missing | (rng.random((n, c)) < rates.missing)
    x[missing] = np.nan
    return SyntheticTask(x=x, missing=missing, y=task.y.copy(), kind=task.kind,
                         n_classes=task.n_classes, seed=task.seed, categorical=categorical)


def task_seed(master_seed: int, index: int) -> int:
    """Independent per-task seed keyed by (master_seed, index)."""
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def generate_task(config: PriorConfig, master_seed: int, index: int, **kwargs) -> SyntheticTask:
    """Draw SCM, task and corruptions for task ``index`` of the stream ``master_seed``."""
    s_scm, s_task, s_corrupt = np.random.SeedSequence([master_seed, index]).generate_state(3)
    scm = sample_scm(config, int(s_scm))
    task = materialize_task(scm, config, int(s_task), **kwargs)
    return apply_corruptions(task, config, int(s_corrupt))


def task_suite(config: PriorConfig, master_seed: int, count: int, start: int = 0, **kwargs) -> list[SyntheticTask]:
    """``count`` consecutive usable tasks of the stream ``master_seed``; degenerate draws are skipped."""
    out, i = [], start
    while len(out) < count:
        try:
            out.append(generate_task(config, master_seed, i, **kwargs))
        except DegeneratePriorError:
            pass
        i += 1
    return out
