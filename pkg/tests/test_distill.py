import time

import numpy as np
import pytest
from scipy.stats import ks_2samp

from picotab import distill
from picotab.distill import (
    DistillConfig,
    DistillationDivergedError,
    TransferSet,
    augment_rows,
    distill_mlp,
    distill_trees,
    generate_transfer_set,
    load_student,
    student_predict,
)
from picotab.engine import FitOptions, fit
from picotab.io import save_checkpoint

FAST = DistillConfig(hidden=32, epochs=60, patience=10, tree_rounds=60)


def _teacher(model, rng, n=60, c=2):
    x = rng.uniform(-1, 1, (n, c))
    y = (x[:, 0] > 0).astype(int)
    return fit(model, x, y, FitOptions(n_estimators=1)), x


def _fixed_transfer(x, probs):
    return TransferSet(x_aug=x, soft_targets=probs, augmented=np.zeros(len(x), bool))


def test_transfer_set_size_and_targets(tiny_model, rng):
    teacher, _ = _teacher(tiny_model, rng, n=100)
    x = rng.uniform(-1, 1, (100, 2))
    ts = generate_transfer_set(teacher, x, r_aug=3, seed=0)
    assert ts.x_aug.shape == (400, 2) and ts.augmented.sum() == 300
    np.testing.assert_array_equal(ts.x_aug[:100], x)
    np.testing.assert_allclose(ts.soft_targets.sum(1), 1.0, atol=1e-6)
    again = generate_transfer_set(teacher, x, r_aug=3, seed=0)
    assert again.x_aug.tobytes() == ts.x_aug.tobytes()


def test_augmented_marginals_match(rng):
    x = np.column_stack([rng.standard_normal(10_000), rng.exponential(size=10_000), rng.integers(0, 4, 10_000)])
    aug = augment_rows(x, 10_000, np.random.default_rng(7))
    for j in range(x.shape[1]):
        assert ks_2samp(x[:, j], aug[:, j]).statistic <= 0.05
    # values only ever come from the same column of the training table
    for j in range(x.shape[1]):
        assert np.isin(aug[:, j], x[:, j]).all()


def test_constant_teacher_mlp(tiny_model, rng):
    teacher, _ = _teacher(tiny_model, rng)
    x = rng.uniform(-1, 1, (1000, 2))
    const = np.tile([0.7, 0.3], (len(x), 1))
    student = distill_mlp(teacher, _fixed_transfer(x, const), FAST)
    grid = rng.uniform(-1, 1, (500, 2))
    q = student_predict(student, grid).probs
    kl = np.sum(const[:1] * np.log(const[:1] / q), axis=1)
    assert kl.max() <= 1e-3


def test_constant_teacher_trees(tiny_model, rng):
    teacher, x = _teacher(tiny_model, rng)
    student = distill_trees(teacher, _fixed_transfer(x, np.tile([0.7, 0.3], (len(x), 1))), FAST)
    q = student_predict(student, rng.uniform(-3, 3, (500, 2))).probs
    assert np.abs(q - [0.7, 0.3]).max() <= 0.02


def _axis_boundary(x):
    p = np.where(x[:, 0] > 0.2, 0.9, 0.1)
    return np.column_stack([1 - p, p])


def test_axis_aligned_boundary_trees(tiny_model, rng):
    teacher, _ = _teacher(tiny_model, rng)
    x = rng.uniform(-1, 1, (800, 2))
    student = distill_trees(teacher, _fixed_transfer(x, _axis_boundary(x)), FAST)
    g = np.linspace(-0.99, 0.99, 60)
    grid = np.array(np.meshgrid(g, g)).reshape(2, -1).T
    agree = student_predict(student, grid).probs.argmax(1) == _axis_boundary(grid).argmax(1)
    assert agree.mean() >= 0.98


def test_monotone_task_agreement(tiny_model, rng):
    teacher, _ = _teacher(tiny_model, rng)
    x = rng.uniform(-1, 1, (800, 2))
    soft = lambda z: np.column_stack([1 / (1 + np.exp(4 * z[:, 0] + 2 * z[:, 1])),
                                      1 / (1 + np.exp(-4 * z[:, 0] - 2 * z[:, 1]))])
    held = rng.uniform(-1, 1, (400, 2))
    for fn in (distill_trees, distill_mlp):
        student = fn(teacher, _fixed_transfer(x, soft(x)), FAST)
        agree = student_predict(student, held).probs.argmax(1) == soft(held).argmax(1)
        assert agree.mean() >= 0.95, fn.__name__


def test_real_teacher_outputs_valid(tiny_model, rng):
    teacher, x = _teacher(tiny_model, rng)
    ts = generate_transfer_set(teacher, x, r_aug=1, seed=1)
    for fn in (distill_mlp, distill_trees):
        d = student_predict(fn(teacher, ts, FAST), x)
        np.testing.assert_allclose(d.probs.sum(1), 1.0, atol=1e-9)
        assert set(d.point()) <= set(teacher.classes)


@pytest.mark.parametrize("fn", [distill_mlp, distill_trees])
def test_persistence_roundtrip(tiny_model, rng, tmp_path, fn):
    teacher, x = _teacher(tiny_model, rng)
    student = fn(teacher, generate_transfer_set(teacher, x, r_aug=1), FAST)
    save_checkpoint(student.to_container(), tmp_path / "s.tpfn")
    back = load_student(tmp_path / "s.tpfn")
    a, b = student_predict(student, x).probs, student_predict(back, x).probs
    assert a.tobytes() == b.tobytes()


def test_deterministic(tiny_model, rng):
    teacher, x = _teacher(tiny_model, rng)
    ts = generate_transfer_set(teacher, x, r_aug=1)
    a = student_predict(distill_mlp(teacher, ts, FAST), x).probs
    b = student_predict(distill_mlp(teacher, ts, FAST), x).probs
    assert a.tobytes() == b.tobytes()


def test_schema_mismatch(tiny_model, rng):
    teacher, x = _teacher(tiny_model, rng)
    student = distill_trees(teacher, _fixed_transfer(x, _axis_boundary(x)), FAST)
    with pytest.raises(ValueError):
        student_predict(student, x[:, :1])


def _median_latencies(students, row, reps=400):
    # interleaved so that machine-load drift hits both students alike
    times = np.zeros((reps, len(students)))
    for r in range(reps):
        for j, s in enumerate(students):
            t0 = time.perf_counter()
            student_predict(s, row)
            times[r, j] = time.perf_counter() - t0
    return np.median(times, axis=0)


def test_latency_independent_of_teacher_size(tiny_model, rng):
    students = []
    for n in (50, 500):
        x = rng.uniform(-1, 1, (n, 2))
        teacher = fit(tiny_model, x, (x[:, 0] > 0).astype(int), FitOptions(n_estimators=1))
        students.append(distill_mlp(teacher, _fixed_transfer(x, _axis_boundary(x)), FAST))
    sizes = [sum(p.numel() for p in s.mlp.parameters()) for s in students]
    assert sizes[0] == sizes[1]
    row = rng.uniform(-1, 1, (1, 2))
    _median_latencies(students, row, 50)  # warm-up
    small, large = _median_latencies(students, row)
    assert abs(large - small) <= 0.1 * small


def test_divergence_signalled(tiny_model, rng):
    teacher, x = _teacher(tiny_model, rng)
    bad = np.full((len(x), 2), np.nan)
    with pytest.raises(DistillationDivergedError) as err:
        distill_mlp(teacher, _fixed_transfer(x, bad), FAST)
    assert err.value.best_student is None
    with pytest.raises(ValueError):
        distill_mlp(teacher, _fixed_transfer(x[:0], bad[:0]), FAST)


def test_divergence_keeps_best_so_far(tiny_model, rng, monkeypatch):
    teacher, x = _teacher(tiny_model, rng)
    ts = _fixed_transfer(x, _axis_boundary(x))
    real_step = distill.torch.optim.Adam.step
    calls = {"n": 0}

    def poisoned(self, *a, **k):
        calls["n"] += 1
        out = real_step(self, *a, **k)
        if calls["n"] == 5:
            for group in self.param_groups:
                for p in group["params"]:
                    p.data.fill_(float("nan"))
        return out

    monkeypatch.setattr(distill.torch.optim.Adam, "step", poisoned)
    with pytest.raises(DistillationDivergedError) as err:
        distill_mlp(teacher, ts, DistillConfig(hidden=16, batch_size=16, epochs=10))
    best = err.value.best_student
    assert best is not None
    assert np.isfinite(student_predict(best, x).probs).all()
