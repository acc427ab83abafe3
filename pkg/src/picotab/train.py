"""Pretraining on streamed synthetic prior tasks."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from picotab import io
from picotab.model import (
    ModelConfig,
    TabularTransformer,
    bin_targets,
    group_features,
    loss,
    pad_groups,
    standard_bin_spec,
)
from picotab.preprocessing import (
    MAX_SVD_COMPONENTS,
    TRANSFORMS,
    EstimatorRecipe,
    FeatureSchema,
    fit_recipe,
)
from picotab.prior import DegeneratePriorError, PriorConfig, apply_corruptions, materialize_task, sample_scm

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, last_checkpoint: Path | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    warmup_steps: int = 200
    min_lr_ratio: float = 0.1
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 500
    out_dir: str = "checkpoints"
    deterministic: bool = True
    n_threads: int = 1
    min_context_fraction: float = 0.5
    max_context_fraction: float = 0.9
    log_every: int = 50


@dataclass
class Batch:
    groups_ctx: torch.Tensor
    y_ctx: torch.Tensor
    groups_test: torch.Tensor
    y_test: torch.Tensor
    kind: str
    n_classes: torch.Tensor
    positions: torch.Tensor


def learning_rate(step: int, cfg: TrainConfig) -> float:
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / max(1, cfg.steps - cfg.warmup_steps)
    cosine = 0.5 * (1 + math.cos(math.pi * min(progress, 1.0)))
    return cfg.lr * (cfg.min_lr_ratio + (1 - cfg.min_lr_ratio) * cosine)


def _draw_task(prior: PriorConfig, seed: int, step: int, slot: int, n_rows: int, kind: str):
    for attempt in range(100):
        s_scm, s_task, s_cor = np.random.SeedSequence([seed, step, slot, attempt]).generate_state(3)
        scm = sample_scm(prior, int(s_scm))
        try:
            task = materialize_task(scm, prior, int(s_task), n_rows=n_rows, kind=kind)
        except DegeneratePriorError:
            continue
        return apply_corruptions(task, prior, int(s_cor))
    raise DegeneratePriorError(f"no usable task for step {step} slot {slot}")


def make_batch(prior: PriorConfig, model_cfg: ModelConfig, cfg: TrainConfig, step: int) -> Batch:
    """Deterministic batch for ``step``: same row count, kind and split for every task."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, step, 1_000_003]))
    kind = "classification" if rng.random() < prior.task_mix[0] else "regression"
    n_rows = int(rng.integers(prior.min_rows, prior.max_rows + 1))
    frac = rng.uniform(cfg.min_context_fraction, cfg.max_context_fraction)
    n_ctx = min(max(2, int(round(frac * n_rows))), n_rows - 1)
    spec = standard_bin_spec(model_cfg.n_bins)

    xs, ms, ys_ctx, ys_test, ncls = [], [], [], [], []
    for slot in range(cfg.batch_size):
        task = _draw_task(prior, cfg.seed, step, slot, n_rows, kind)
        trng = np.random.default_rng(task.seed)
        order = trng.permutation(n_rows)
        ctx, test = order[:n_ctx], order[n_ctx:]
        transform = TRANSFORMS[int(trng.integers(len(TRANSFORMS)))]
        recipe = EstimatorRecipe(
            seed=int(trng.integers(2**32)),
            numeric_transform=transform,
            feature_permutation=np.arange(task.n_features),
            feature_subset=np.arange(task.n_features),
            svd_k=MAX_SVD_COMPONENTS if transform.endswith("svd") else 0,
        )
        schema = FeatureSchema(task.n_features, task.categorical, (0,) * task.n_features)
        fitted = fit_recipe(task.x[ctx], schema, recipe)
        pre = fitted.transform(task.x[np.concatenate([ctx, test])])
        xs.append(pre.values)
        ms.append(pre.missing)
        y = task.y.astype(float)
        if kind == "regression":
            mu, sd = y[ctx].mean(), y[ctx].std()
            sd = sd if sd > 1e-12 else 1.0
            ys_ctx.append((y[ctx] - mu) / sd)
            ys_test.append(bin_targets((y[test] - mu) / sd, spec))
            ncls.append(0)
        else:
            ys_ctx.append(y[ctx])
            ys_test.append(y[test])
            ncls.append(task.n_classes)

    groups = [group_features(torch.tensor(x, dtype=torch.float32)[None], torch.tensor(m, dtype=torch.float32)[None],
                             model_cfg.group_size)[0] for x, m in zip(xs, ms)]
    n_groups = max(g.shape[1] for g in groups)
    groups = torch.cat([pad_groups(g[None], n_groups) for g in groups])
    pos_seed = int(rng.integers(2**62))
    gen = torch.Generator().manual_seed(pos_seed)
    positions = torch.randn(cfg.batch_size, n_groups, model_cfg.pos_dim, generator=gen)
    y_dtype = torch.float32 if kind == "regression" else torch.int64
    return Batch(
        groups_ctx=groups[:, :n_ctx],
        y_ctx=torch.tensor(np.stack(ys_ctx), dtype=y_dtype),
        groups_test=groups[:, n_ctx:],
        y_test=torch.tensor(np.stack(ys_test), dtype=torch.int64),
        kind=kind,
        n_classes=torch.tensor(ncls),
        positions=positions,
    )


def batch_loss(model: TabularTransformer, batch: Batch) -> torch.Tensor:
    logits = model(batch.groups_ctx, batch.y_ctx, batch.groups_test, batch.kind, batch.positions)
    return loss(logits, batch.y_test, batch.kind, batch.n_classes if batch.kind == "classification" else None)


@dataclass
class Checkpoint:
    model: TabularTransformer
    prior: PriorConfig
    train: TrainConfig
    step: int
    optimizer_state: dict | None = None
    losses: list | None = None

    def to_container(self) -> io.Container:
        header = {"train.step": str(self.step)}
        header.update(io.dataclass_to_header(self.prior, "prior."))
        header.update(io.dataclass_to_header(self.train, "train."))
        container = self.model.to_container(header)
        if self.optimizer_state is not None:
            names = [n for n, _ in self.model.named_parameters()]
            for idx, st in self.optimizer_state["state"].items():
                for key in ("exp_avg", "exp_avg_sq", "step"):
                    container.tensors[f"optim.{key}.{names[idx]}"] = np.asarray(st[key].detach().cpu(), dtype=np.float32).reshape(-1 if key == "step" else st[key].shape)
        return container

    @classmethod
    def from_container(cls, container: io.Container) -> Checkpoint:
        model = TabularTransformer.from_container(container)
        prior = io.header_to_dataclass(PriorConfig, container.header, "prior.")
        train = io.header_to_dataclass(TrainConfig, container.header, "train.")
        step = int(container.header.get("train.step", 0))
        state = {}
        names = [n for n, _ in model.named_parameters()]
        for i, name in enumerate(names):
            key = f"optim.exp_avg.{name}"
            if key in container.tensors:
                state[i] = {
                    "step": torch.tensor(float(container.tensors[f"optim.step.{name}"][0])),
                    "exp_avg": torch.from_numpy(container.tensors[key].copy()),
                    "exp_avg_sq": torch.from_numpy(container.tensors[f"optim.exp_avg_sq.{name}"].copy()),
                }
        return cls(model=model, prior=prior, train=train, step=step, optimizer_state={"state": state} if state else None)


def load_training_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_container(io.load_checkpoint(path))


def _make_optimizer(model, cfg: TrainConfig):
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def pretrain(
    prior: PriorConfig,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
    callback=None,
) -> Checkpoint:
    """Minimize the prior loss with AdamW under warmup + cosine decay.

    Batches are a pure function of ``(cfg.seed, step)``, so a resumed run
    continues the exact stream. ``stop_after`` ends the run early (at that
    step) without changing the schedule.
    """
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(cfg.n_threads)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume is None:
        torch.manual_seed(cfg.seed)
        model = TabularTransformer(model_cfg)
        start = 0
    else:
        model, start = resume.model, resume.step
        model_cfg = model.config
    model.train()
    opt = _make_optimizer(model, cfg)
    if resume is not None and resume.optimizer_state is not None:
        opt.load_state_dict({"state": resume.optimizer_state["state"], "param_groups": opt.state_dict()["param_groups"]})

    losses = []
    last_ckpt = None
    end = cfg.steps if stop_after is None else min(cfg.steps, stop_after)
    t0 = time.time()
    for step in range(start, end):
        batch = make_batch(prior, model_cfg, cfg, step)
        for group in opt.param_groups:
            group["lr"] = learning_rate(step, cfg)
        value = batch_loss(model, batch)
        if not torch.isfinite(value):
            raise TrainingDivergedError(f"loss became {value.item()} at step {step}", last_ckpt)
        opt.zero_grad(set_to_none=True)
        value.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        losses.append(value.item())
        if callback is not None:
            callback(step, value.item())
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            recent = np.mean(losses[-cfg.log_every:])
            log.info("step %d loss %.4f (%.1fs)", step + 1, recent, time.time() - t0)
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            ckpt = Checkpoint(model, prior, cfg, step + 1, opt.state_dict())
            last_ckpt = out_dir / f"step_{step + 1:07d}.tpfn"
            io.save_checkpoint(ckpt, last_ckpt)
    model.eval()
    return Checkpoint(model, prior, cfg, end, opt.state_dict(), losses)


def desk_prior() -> PriorConfig:
    """Prior used for the shipped desk model."""
    from picotab.prior import CorruptionRates

    return PriorConfig(
        max_rows=256,
        min_rows=24,
        max_features=10,
        max_classes=10,
        dag_nodes_range=(2, 14),
        edge_density=0.4,
        noise_scale_range=(0.0, 0.3),
        task_mix=(0.7, 0.3),
        corruption_rates=CorruptionRates(missing=0.02, outlier=0.01, categorize=0.05),
    )


def with_steps(cfg: TrainConfig, steps: int) -> TrainConfig:
    return replace(cfg, steps=steps)
