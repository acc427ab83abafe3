import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import softmax
from sklearn.metrics import accuracy_score, f1_score

from picotab.postproc import (
    T_MAX,
    T_MIN,
    Temperature,
    UndefinedMetricError,
    apply_temperature,
    candidate_thresholds,
    fit_temperature,
    nll,
    tune_threshold,
    tune_threshold_oof,
)

SKLEARN = {
    "f1": lambda y, p: f1_score(y, p, zero_division=0),
    "macro_f1": lambda y, p: f1_score(y, p, average="macro", zero_division=0),
    "accuracy": accuracy_score,
}


def brute_force_threshold(probs, y, metric):
    """Sweep every candidate with sklearn's metric; first max wins (lowest threshold)."""
    best_t, best_s = None, -1.0
    for t in sorted(candidate_thresholds(probs)):
        s = SKLEARN[metric](y, (probs >= t).astype(int))
        if s > best_s:
            best_t, best_s = t, s
    return best_t, best_s


def test_threshold_textbook_example():
    pol = tune_threshold([0.1, 0.4, 0.6, 0.9], [0, 0, 1, 1], "f1")
    assert pol.threshold == 0.5 and pol.score == 1.0
    assert pol.apply([0.45, 0.5]).tolist() == [0, 1]


def test_single_class_rejected():
    with pytest.raises(UndefinedMetricError):
        tune_threshold([0.2, 0.8], [1, 1])


@given(st.integers(0, 2**31), st.sampled_from(["f1", "macro_f1", "accuracy"]), st.integers(4, 60))
@settings(max_examples=80, deadline=None)
def test_threshold_matches_bruteforce(seed, metric, n):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    y[:2] = [0, 1]
    probs = np.round(rng.random(n), 2)  # rounding forces ties
    pol = tune_threshold(probs, y, metric)
    t, s = brute_force_threshold(probs, y, metric)
    assert pol.threshold == t
    assert pol.score == pytest.approx(s, abs=1e-12)
    assert pol.score >= SKLEARN[metric](y, (probs >= 0.5).astype(int)) - 1e-12


@given(st.integers(0, 2**31))
@settings(max_examples=30)
def test_threshold_invariant_to_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, 30)
    y[:2] = [0, 1]
    p = rng.random(30)
    q = p**3  # strictly increasing on [0, 1]
    a, b = tune_threshold(p, y), tune_threshold(q, y)
    assert a.score == b.score
    np.testing.assert_array_equal(a.apply(p), b.apply(q))


def test_oof_tuning_uses_every_row_once():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((50, 2))
    y = (x[:, 0] > 0.8).astype(int)
    seen = []

    def fp(xt, yt, xe):
        seen.append(len(xe))
        return 1 / (1 + np.exp(-3 * xe[:, 0]))

    pol, oof = tune_threshold_oof(x, y, fp, n_folds=5)
    assert sum(seen) == 50 and len(seen) == 5
    np.testing.assert_allclose(oof, 1 / (1 + np.exp(-3 * x[:, 0])))
    assert 0 <= pol.threshold <= 1


# -- temperature --------------------------------------------------------------


def test_temperature_one_is_softmax(rng):
    z = rng.standard_normal((5, 3))
    np.testing.assert_array_equal(apply_temperature(z, 1.0), softmax(z, axis=-1))


def test_confident_correct_labels_hit_lower_bound():
    z = np.array([[3.0, 0.0], [0.0, 2.0], [1.0, -1.0]])
    assert fit_temperature(z, [0, 1, 0]).t == T_MIN


def test_bounds_enforced():
    with pytest.raises(ValueError):
        Temperature(0.01)
    with pytest.raises(ValueError):
        fit_temperature(np.zeros((1, 2)), [0])


def dense_oracle(z, y, n=100_000):
    grid = np.geomspace(T_MIN, T_MAX, n)
    vals = np.array([nll(z, y, t) for t in grid])
    return grid[np.argmin(vals)]


def test_three_sample_mixed_case_matches_dense_grid():
    z = np.array([[2.0, 0.0, -1.0], [0.5, 1.5, 0.0], [1.0, 0.8, 0.2]])
    y = np.array([0, 0, 2])
    t = fit_temperature(z, y).t
    assert abs(t - dense_oracle(z, y)) <= 1e-3


@given(st.integers(0, 2**31))
@settings(max_examples=10, deadline=None)
def test_fit_matches_dense_grid_and_beats_identity(seed):
    rng = np.random.default_rng(seed)
    z = 3 * rng.standard_normal((40, 4))
    y = np.where(rng.random(40) < 0.6, z.argmax(1), rng.integers(0, 4, 40))
    t = fit_temperature(z, y).t
    assert nll(z, y, t) <= nll(z, y, 1.0)
    oracle = dense_oracle(z, y, 20_000)
    if T_MIN < oracle < T_MAX:
        assert abs(t - oracle) <= 1e-3 * max(1.0, oracle)


@given(arrays(float, (6, 4), elements=st.floats(-30, 30)), st.floats(0.05, 20))
def test_argmax_preserved(z, t):
    # gaps below float resolution of z / t have no argmax left to preserve
    top2 = np.sort(z, axis=1)[:, -2:]
    keep = (top2[:, 1] - top2[:, 0]) / t > 1e-9
    p = apply_temperature(z, t)
    np.testing.assert_array_equal(p[keep].argmax(1), z[keep].argmax(1))
