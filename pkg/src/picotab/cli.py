"""Command-line entry point: ``picotab <subcommand> [--config FILE] [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
Each subcommand reads optional ``key = value`` settings from ``--config``;
flags given on the command line override them.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from picotab import io

log = logging.getLogger("picotab")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _settings(args, required=()) -> dict:
    """Merge config-file values under explicit flags; check required keys."""
    merged = {}
    if getattr(args, "config", None):
        merged.update({k.replace("-", "_"): v for k, v in io.read_config_file(args.config).items()})
    for key, value in vars(args).items():
        if value is not None and key not in ("command", "func", "config"):
            merged[key] = value
    if "seed" not in merged:
        merged["seed"] = os.environ.get("PICOTAB_SEED", 0)
    missing = [k for k in required if merged.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return merged


def _load_model(s):
    from picotab.engine import default_model
    from picotab.model import load_model

    return load_model(s["model"]) if s.get("model") else default_model()


def _fit_options(s):
    from picotab.engine import FitOptions

    return FitOptions(
        n_estimators=int(s.get("n_estimators", 8)),
        fit_mode=s.get("fit_mode", "lazy"),
        batch_size_test=int(s.get("batch_size_test", 1024)),
        device_workers=int(s.get("device_workers", 1)),
        seed=int(s["seed"]),
    )


def _out_dir(s) -> Path:
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain(args) -> int:
    from picotab.model import ModelConfig
    from picotab.train import TrainConfig, desk_prior, load_training_checkpoint, pretrain

    s = _settings(args, required=("out",))
    out = _out_dir(s)
    header = {f"model.{k}": v for k, v in s.items() if k in ModelConfig.__dataclass_fields__}
    model_cfg = io.header_to_dataclass(ModelConfig, header, "model.")
    prior = io.header_to_dataclass(type(desk_prior()), {f"prior.{k[6:]}": v for k, v in s.items()
                                                         if k.startswith("prior_")}, "prior.")
    if not any(k.startswith("prior_") for k in s):
        prior = desk_prior()
    train_cfg = TrainConfig(
        steps=int(s.get("steps", 2000)),
        batch_size=int(s.get("batch_size", 8)),
        lr=float(s.get("lr", 1e-3)),
        seed=int(s["seed"]),
        checkpoint_every=int(s.get("checkpoint_every", 500)),
        out_dir=str(out / "checkpoints"),
    )
    resume = load_training_checkpoint(s["resume"]) if s.get("resume") else None
    ckpt = pretrain(prior, model_cfg, train_cfg, resume=resume)
    ckpt.optimizer_state = None
    io.save_checkpoint(ckpt, out / "model.tpfn")
    with open(out / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        start = ckpt.step - len(ckpt.losses or [])
        for i, v in enumerate(ckpt.losses or []):
            w.writerow([start + i, repr(v)])
    print(f"wrote {out / 'model.tpfn'}")
    return EXIT_OK


def write_predictions(dist, path, class_labels=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if dist.kind == "classification":
            labels = class_labels if class_labels is not None else [_fmt_label(c) for c in dist.classes]
            w.writerow([f"p_{c}" for c in labels] + ["prediction"])
            points = [labels[i] for i in np.argmax(dist.probs, axis=1)]
        else:
            w.writerow([f"bin_{k}" for k in range(dist.probs.shape[1])] + ["prediction"])
            points = [repr(float(v)) for v in dist.point()]
        for row, point in zip(dist.probs, points):
            w.writerow([repr(float(p)) for p in row] + [point])


def _fmt_label(c) -> str:
    c = float(c)
    return str(int(c)) if c.is_integer() else repr(c)


def _read_train_test(s):
    from picotab.io import Dataset

    categorical = set(filter(None, str(s.get("categorical", "")).split(",")))
    train = io.load_table(s["train"], target=s["target"], categorical=categorical)
    test_raw = io.load_table(s["test"], target=s["target"] if _has_column(s["test"], s["target"]) else None,
                             categorical=categorical)
    x_test = _align(test_raw, train)
    return train, Dataset(x=x_test, columns=train.columns, categorical=train.categorical,
                          categories=train.categories)


def _has_column(path, name) -> bool:
    with open(path, newline="") as fh:
        return name in next(csv.reader(fh), [])


def _align(test: io.Dataset, train: io.Dataset) -> np.ndarray:
    """Re-express test columns in the train schema (order and category codes)."""
    from picotab.engine import IncompatibleInputError

    missing_cols = [c for c in train.columns if c not in test.columns]
    if missing_cols:
        raise IncompatibleInputError(f"test table lacks columns {missing_cols}")
    out = np.full((test.x.shape[0], len(train.columns)), np.nan)
    for j, name in enumerate(train.columns):
        k = test.columns.index(name)
        col = test.x[:, k]
        if train.categorical[j]:
            levels = {lvl: i for i, lvl in enumerate(train.categories[j])}
            src = test.categories[k] if test.categorical[k] else None
            for i, v in enumerate(col):
                if np.isnan(v):
                    continue
                label = src[int(v)] if src is not None else _fmt_label(v)
                # unseen levels get a code past the train range; the recipe maps them to its reserved code
                out[i, j] = levels.get(label, len(levels))
        else:
            if test.categorical[k]:
                raise IncompatibleInputError(f"column {name!r} is numeric in train but not in test")
            out[:, j] = col
    return out


def cmd_fit_predict(args) -> int:
    from picotab.engine import fit, predict_distribution

    s = _settings(args, required=("train", "test", "target", "out"))
    train, test = _read_train_test(s)
    model = _load_model(s)
    kind = s.get("task") or ("classification" if train.target_categories is not None else None)
    y = train.y
    fm = fit(model, train, y, _fit_options(s), kind=kind)
    dist = predict_distribution(fm, test)
    labels = None
    if fm.kind == "classification" and train.target_categories is not None:
        labels = [train.target_categories[int(c)] for c in fm.classes]
    out = Path(s["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(dist, out, labels)
    print(f"wrote {len(dist)} predictions to {out}")
    return EXIT_OK


def cmd_distill(args) -> int:
    from picotab.distill import DistillConfig, distill_mlp, distill_trees, generate_transfer_set
    from picotab.engine import fit

    s = _settings(args, required=("train", "target", "out"))
    out = _out_dir(s)
    categorical = set(filter(None, str(s.get("categorical", "")).split(",")))
    train = io.load_table(s["train"], target=s["target"], categorical=categorical)
    teacher = fit(_load_model(s), train, train.y, _fit_options(s), kind="classification")
    transfer = generate_transfer_set(teacher, train, float(s.get("r_aug", 3.0)), int(s["seed"]))
    cfg = DistillConfig(seed=int(s["seed"]))
    student = (distill_trees if s.get("student", "mlp") == "trees" else distill_mlp)(teacher, transfer, cfg)
    io.save_checkpoint(student, out / "student.tpfn")
    print(f"wrote {out / 'student.tpfn'}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from picotab.bench import run_bench

    s = _settings(args, required=("results", "out"))
    rows = run_bench(s["results"], s["out"])
    for r in rows:
        print(f"{r.model}\t{r.mean:.4f} +- {r.sem:.4f} (n={r.n_datasets})")
    return EXIT_OK


def cmd_cate(args) -> int:
    from sklearn.neighbors import KNeighborsRegressor

    from picotab import causal
    from picotab.engine import InContextClassifier, InContextRegressor

    s = _settings(args, required=("data", "treatment", "outcome", "out"))
    out = _out_dir(s)
    table = io.load_table(s["data"])
    cols = table.columns
    for name in (s["treatment"], s["outcome"]):
        if name not in cols:
            raise io.TableParseError(f"column {name!r} not found")
    ti, yi = cols.index(s["treatment"]), cols.index(s["outcome"])
    keep = [j for j in range(len(cols)) if j not in (ti, yi)]
    data = causal.CausalDataset(x=table.x[:, keep], t=table.x[:, ti], y=table.x[:, yi])
    opts = _fit_options(s)
    if s.get("base", "engine") == "knn":
        def base():
            return KNeighborsRegressor(1)
    else:
        model = _load_model(s)

        def base():
            return InContextRegressor(model, opts)

    learner = s.get("learner", "t")
    if learner == "t":
        tau = causal.t_learner(data, base)
    elif learner == "s":
        tau = causal.s_learner(data, base)
    elif learner == "x":
        model = _load_model(s)
        tau = causal.x_learner(data, base, lambda: InContextClassifier(model, opts))
    else:
        raise UsageError(f"unknown learner {learner!r}")
    with open(out / "cate.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cate"])
        w.writerows([[repr(float(v))] for v in tau])
    print(f"ATE estimate {tau.mean():.4f}; wrote {out / 'cate.csv'}")
    return EXIT_OK


def quadratic_objective(space):
    """Demo response surface peaking at the centre of every numeric dimension."""
    def objective(cfg):
        vec = space.encode(cfg)
        return -float(np.sum((vec - 0.5) ** 2))
    return objective


def cmd_hpo(args) -> int:
    from picotab import hpo

    s = _settings(args, required=("space", "out"))
    out = _out_dir(s)
    space = hpo.SearchSpace.from_file(s["space"])
    seed = int(s["seed"])
    if s.get("objective", "quadratic") == "engine":
        objective = _engine_objective(s)
        surrogate = hpo.engine_surrogate(_load_model(s))
    else:
        objective = quadratic_objective(space)
        surrogate = hpo.engine_surrogate(_load_model(s)) if s.get("surrogate") == "engine" else _knn_surrogate
    obs = hpo.evaluate_seed_grid(space, int(s.get("n_seed", 100)), objective, seed)
    ranked = hpo.surrogate_rank(space, obs, int(s.get("n_candidates", 10000)), int(s.get("top_m", 10)),
                                surrogate, seed)
    keys = [d.key for d in space.dims]
    with open(out / "observations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys + ["score", "failed"])
        for o in obs:
            w.writerow([o.config[k] for k in keys] + [repr(o.score), int(o.failed)])
    with open(out / "top_candidates.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys + ["predicted_score"])
        for cfg, p in zip(ranked.configs, ranked.predicted):
            w.writerow([cfg[k] for k in keys] + [repr(float(p))])
    print(f"best predicted config: {ranked.configs[0]}")
    return EXIT_OK


def _knn_surrogate(x_obs, y_obs, x_cand):
    from sklearn.neighbors import KNeighborsRegressor

    return KNeighborsRegressor(min(5, len(y_obs))).fit(x_obs, y_obs).predict(x_cand)


def _engine_objective(s):
    """Holdout accuracy of the engine on --train with FitOptions taken from the config."""
    from picotab.engine import fit, predict

    train = io.load_table(s["train"], target=s["target"])
    rng = np.random.default_rng(int(s["seed"]))
    idx = rng.permutation(len(train.y))
    cut = int(0.7 * len(idx))
    tr, ev = idx[:cut], idx[cut:]
    model = _load_model(s)
    base = _fit_options(s)

    def objective(cfg):
        opts = replace(base, **{k: v for k, v in cfg.items() if k in base.__dataclass_fields__})
        fm = fit(model, train.x[tr], train.y[tr], opts, kind="classification")
        return float(np.mean(predict(fm, train.x[ev]) == train.y[ev]))

    return objective


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="picotab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.set_defaults(func=func)
        return p

    p = add("pretrain", cmd_pretrain, "pretrain a model on the synthetic prior")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--resume")

    for name, func, text in (("fit-predict", cmd_fit_predict, "fit on --train, predict --test"),
                             ("distill", cmd_distill, "distill a fitted ensemble into a student")):
        p = add(name, func, text)
        p.add_argument("--train")
        p.add_argument("--target")
        p.add_argument("--model")
        p.add_argument("--categorical", help="comma-separated column names to force categorical")
        p.add_argument("--n-estimators", type=int)
        p.add_argument("--fit-mode", choices=["lazy", "fit_with_cache"])
        if name == "fit-predict":
            p.add_argument("--test")
            p.add_argument("--task", choices=["classification", "regression"])
        else:
            p.add_argument("--student", choices=["mlp", "trees"])
            p.add_argument("--r-aug", type=float)

    p = add("bench", cmd_bench, "normalize, aggregate and compute win rates")
    p.add_argument("--results")

    p = add("cate", cmd_cate, "estimate CATEs with a meta-learner")
    p.add_argument("--data")
    p.add_argument("--treatment")
    p.add_argument("--outcome")
    p.add_argument("--learner", choices=["t", "s", "x"])
    p.add_argument("--base", choices=["engine", "knn"])
    p.add_argument("--model")

    p = add("hpo", cmd_hpo, "seed grid + surrogate ranking")
    p.add_argument("--space")
    p.add_argument("--objective", choices=["quadratic", "engine"])
    p.add_argument("--surrogate", choices=["knn", "engine"])
    p.add_argument("--n-seed", type=int)
    p.add_argument("--n-candidates", type=int)
    p.add_argument("--top-m", type=int)
    p.add_argument("--train")
    p.add_argument("--target")
    p.add_argument("--model")
    return parser


def dispatch(argv) -> int:
    from picotab.distill import DistillationDivergedError
    from picotab.engine import DegenerateTargetError, IncompatibleInputError
    from picotab.hpo import ObjectiveBrokenError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr)
        return EXIT_USAGE
    except (io.TableParseError, IncompatibleInputError, DegenerateTargetError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ObjectiveBrokenError, DistillationDivergedError, RuntimeError, ValueError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
