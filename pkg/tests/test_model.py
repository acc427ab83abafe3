import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from picotab import io
from picotab import model as model_mod
from picotab.model import (
    EmptyInputError,
    InvalidTargetError,
    ModelConfig,
    TabularTransformer,
    bin_targets,
    distribution_to_point,
    group_features,
    loss,
    pad_groups,
    positional_vectors,
    standard_bin_spec,
)

from conftest import TINY


def _task(n_ctx, n_test, c, n_classes=3, seed=0, dtype=torch.float32, cfg=TINY):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(1, n_ctx + n_test, c, generator=gen, dtype=dtype)
    miss = (torch.rand(1, n_ctx + n_test, c, generator=gen) < 0.1).to(dtype)
    x = x * (1 - miss)
    groups = group_features(x, miss, cfg.group_size)
    y = torch.randint(0, n_classes, (1, n_ctx), generator=gen)
    pos = positional_vectors(groups.shape[2], seed, cfg.pos_dim, dtype=dtype)
    return groups[:, :n_ctx], y, groups[:, n_ctx:], pos


def dense_reference(model, groups_ctx, y_ctx, groups_test, kind, positions):
    """Full token grid with an explicit row-attention mask; no caching, no split softmax."""
    ctx = model.embed_context(groups_ctx, y_ctx, kind, positions)
    test = model.embed_test(groups_test, positions)
    h = torch.cat([ctx, test], dim=1)
    n_ctx, n = ctx.shape[1], h.shape[1]
    allowed = torch.zeros(n, n, dtype=torch.bool)
    allowed[:, :n_ctx] = True
    allowed |= torch.eye(n, dtype=torch.bool)
    for block in model.blocks:
        q, k, v = block.row_kv(h)  # [B, cols, H, n, dh]
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        scores = scores.masked_fill(~allowed, float("-inf"))
        upd = block.row_out(block._merge(torch.softmax(scores, dim=-1) @ v))
        h = block.finish(h + upd)
    out = model.head_norm(h[:, n_ctx:, -1])
    return model.class_head(out) if kind == "classification" else model.bin_head(out)


# -- tokenization ----------------------------------------------------------------


def test_group_shapes():
    g = group_features(torch.zeros(1, 4, 7), torch.zeros(1, 4, 7), 3)
    assert g.shape == (1, 4, 3, 7)
    # two padded slots in the last group carry missing flags
    assert g[0, 0, 2, 3:6].tolist() == [0.0, 1.0, 1.0]
    assert (g[..., -1] == 0).all()
    with pytest.raises(EmptyInputError):
        group_features(torch.zeros(1, 4, 0), torch.zeros(1, 4, 0), 3)


def test_pad_groups_flags():
    g = pad_groups(group_features(torch.ones(1, 2, 3), torch.zeros(1, 2, 3), 3), 3)
    assert g.shape == (1, 2, 3, 7)
    assert g[0, 0, 1].tolist() == [0, 0, 0, 1, 1, 1, 1]


def test_grid_rows(tiny_model):
    cfg = TINY
    gc, y, gt, pos = _task(5, 2, 7)
    grid = torch.cat([tiny_model.embed_context(gc, y, "classification", pos), tiny_model.embed_test(gt, pos)], 1)
    assert grid.shape == (1, cfg.n_thinking + 5 + 2, 3 + 1, cfg.dim)


def test_all_missing_column_is_finite(tiny_model):
    x = torch.randn(1, 9, 4)
    x[..., 1] = 0
    miss = torch.zeros_like(x)
    miss[..., 1] = 1
    g = group_features(x, miss, 3)
    pos = positional_vectors(g.shape[2], 0, TINY.pos_dim)
    out = tiny_model(g[:, :6], torch.tensor([[0, 1, 2, 0, 1, 2]]), g[:, 6:], "classification", pos)
    assert out.shape == (1, 3, TINY.max_classes) and torch.isfinite(out).all()


def test_logit_shapes(tiny_model):
    gc, y, gt, pos = _task(6, 2, 4)
    assert tiny_model(gc, y, gt, "classification", pos).shape == (1, 2, TINY.max_classes)
    yr = torch.randn(1, 6)
    assert tiny_model(gc, yr, gt, "regression", pos).shape == (1, 2, TINY.n_bins)


def test_thinking_rows_parameter_count():
    a = TabularTransformer(TINY)
    b = TabularTransformer(ModelConfig(**{**TINY.__dict__, "n_thinking": 0}))
    count = lambda m: sum(p.numel() for p in m.parameters())
    assert count(a) - count(b) == TINY.n_thinking * TINY.dim


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(dim=10, heads=3)
    with pytest.raises(ValueError):
        ModelConfig(n_bins=1)


# -- forward semantics -------------------------------------------------------------


@pytest.mark.parametrize("kind", ["classification", "regression"])
def test_matches_dense_masked_oracle(kind):
    torch.manual_seed(1)
    model = TabularTransformer(TINY).double().eval()
    gc, y, gt, pos = _task(11, 5, 8, dtype=torch.float64)
    if kind == "regression":
        y = torch.randn(1, 11, dtype=torch.float64)
    with torch.no_grad():
        fast = model(gc, y, gt, kind, pos)
        slow = dense_reference(model, gc, y, gt, kind, pos)
        chunked = model(gc, y, gt, kind, pos, chunk=2)
    torch.testing.assert_close(fast, slow, rtol=0, atol=1e-12)
    torch.testing.assert_close(chunked, slow, rtol=0, atol=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=15, deadline=None)
def test_context_permutation_invariance(seed):
    torch.manual_seed(seed)
    model = TabularTransformer(TINY).eval()
    gc, y, gt, pos = _task(20, 4, 5, seed=seed)
    perm = torch.randperm(20)
    with torch.no_grad():
        a = model(gc, y, gt, "classification", pos)
        b = model(gc[:, perm], y[:, perm], gt, "classification", pos)
    assert (a - b).abs().max() <= 1e-5


def test_removing_a_test_row_is_exact(tiny_model):
    gc, y, gt, pos = _task(15, 9, 5)
    chunk = TINY.test_chunk
    with torch.no_grad():
        full = tiny_model(gc, y, gt, "classification", pos, chunk=chunk)
        keep = [i for i in range(9) if i != 4]
        part = tiny_model(gc, y, gt[:, keep], "classification", pos, chunk=chunk)
        alone = torch.cat([tiny_model(gc, y, gt[:, i:i + 1], "classification", pos, chunk=chunk)
                           for i in range(9)], dim=1)
    assert torch.equal(full[:, keep], part)
    assert torch.equal(full, alone)


def test_cache_path_equals_forward(tiny_model):
    gc, y, gt, pos = _task(12, 6, 5)
    with torch.no_grad():
        cache = tiny_model.build_cache(gc, y, "classification", pos)
        a = tiny_model.forward_cached(gt, cache, chunk=4)
        b = tiny_model(gc, y, gt, "classification", pos, chunk=4)
    assert torch.equal(a, b)
    assert cache.nbytes() == 2 * TINY.depth * (TINY.n_thinking + 12) * (2 + 1) * TINY.dim * 4
    with pytest.raises(ValueError):
        tiny_model.forward_cached(gt[:, :, :1], cache)


def test_context_query_blocks_match_single_block(tiny_model, monkeypatch):
    gc, y, gt, pos = _task(30, 5, 5)
    with torch.no_grad():
        whole = tiny_model(gc, y, gt, "classification", pos)
        monkeypatch.setattr(model_mod, "CTX_QUERY_BLOCK", 4)
        blocked = tiny_model(gc, y, gt, "classification", pos)
    assert torch.allclose(whole, blocked, atol=1e-6, rtol=0)


def test_empty_test_batch(tiny_model):
    gc, y, gt, pos = _task(5, 0, 3)
    with torch.no_grad():
        assert tiny_model(gc, y, gt, "classification", pos, chunk=4).shape == (1, 0, TINY.max_classes)


# -- bins ----------------------------------------------------------------------


def test_bin_spec_symmetric():
    spec = standard_bin_spec(32, 5.0, 2.0)
    b = spec.borders
    assert np.all(np.diff(b) > 0) and b[0] == -b[-1] == -np.inf
    np.testing.assert_array_equal(b[1:-1], -b[1:-1][::-1])
    assert spec.centers[0] == b[1] and spec.centers[-1] == b[-2]


def test_median_lands_in_middle_bin():
    spec = standard_bin_spec(32, 5.0, 2.0)
    assert bin_targets([5.0], spec)[0] == 16
    assert bin_targets([-1e9, 1e9], spec).tolist() == [0, 31]
    with pytest.raises(InvalidTargetError):
        bin_targets([np.nan], spec)


def test_point_predictions():
    spec = standard_bin_spec(8, 1.0, 3.0)
    for b in range(8):
        onehot = np.eye(8)[b]
        assert distribution_to_point(onehot, spec) == pytest.approx(1.0 + 3.0 * spec.centers[b])
    assert distribution_to_point(np.full(8, 1 / 8), spec) == pytest.approx(1.0, abs=1e-12)


@given(st.floats(-50, 50))
def test_bin_contains_value(z):
    spec = standard_bin_spec(16)
    k = bin_targets([z], spec)[0]
    assert spec.borders[k] <= z < spec.borders[k + 1] or (k == 15 and z >= spec.borders[15])


# -- loss & gradients ---------------------------------------------------------------


def test_loss_uniform_is_log_c():
    logits = torch.zeros(1, 6, 10)
    t = torch.tensor([[0, 1, 2, 0, 1, 2]])
    assert loss(logits, t, "classification", n_classes=3).item() == pytest.approx(math.log(3))


def test_loss_tends_to_zero_with_confidence():
    t = torch.tensor([[1, 0]])
    vals = [loss(s * torch.nn.functional.one_hot(t, 4).float(), t, "classification", 4).item()
            for s in (1, 10, 100)]
    assert vals[0] > vals[1] > vals[2] and vals[2] < 1e-30


def _param_groups_gradcheck(model, closure, n_per_group=6, eps=1e-6, seed=0):
    rng = np.random.default_rng(seed)
    model.zero_grad()
    closure().backward()
    report = {}
    for name, p in model.named_parameters():
        g = p.grad.detach().reshape(-1)
        flat = p.data.reshape(-1)
        top = torch.topk(g.abs(), min(n_per_group // 2, g.numel())).indices.tolist()
        rand = rng.choice(g.numel(), size=min(n_per_group // 2, g.numel()), replace=False).tolist()
        idx = sorted(set(top + rand))
        analytic, numeric = [], []
        with torch.no_grad():
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = closure().item()
                flat[i] = orig - eps
                down = closure().item()
                flat[i] = orig
                analytic.append(g[i].item())
                numeric.append((up - down) / (2 * eps))
        a, f = np.array(analytic), np.array(numeric)
        denom = max(np.linalg.norm(a), np.linalg.norm(f))
        report[name] = (np.linalg.norm(a - f) / denom if denom > 0 else 0.0, denom)
    return report


def check_gradients(seed=0):
    """Relative FD error per parameter tensor on a 4-row task (3 context + 1 test row)."""
    torch.manual_seed(seed)
    model = TabularTransformer(TINY).double()
    gc, y, gt, pos = _task(3, 1, 4, seed=seed, dtype=torch.float64)
    y_reg = torch.randn(1, 3, dtype=torch.float64)
    t_cls = torch.tensor([[1]])
    t_reg = torch.tensor([[3]])

    def closure():
        # both heads so every parameter group receives gradient
        lc = loss(model(gc, y, gt, "classification", pos), t_cls, "classification", 3)
        lr = loss(model(gc, y_reg, gt, "regression", pos), t_reg, "regression")
        return lc + lr

    return _param_groups_gradcheck(model, closure, seed=seed)


def test_finite_difference_gradients():
    report = check_gradients()
    assert len(report) == len(list(TabularTransformer(TINY).parameters()))
    worst = max(r for r, _ in report.values())
    assert all(denom > 0 for _, denom in report.values()), "a parameter group received no gradient"
    assert worst <= 1e-4, {k: v for k, v in report.items() if v[0] > 1e-4}


# -- persistence ------------------------------------------------------------------


def test_model_container_roundtrip(tmp_path, tiny_model):
    path = tmp_path / "m.tpfn"
    io.save_checkpoint(tiny_model, path)
    raw = path.read_bytes()
    from picotab.model import load_model

    back = load_model(path)
    assert back.config == TINY
    for (ka, va), (kb, vb) in zip(tiny_model.state_dict().items(), back.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    io.save_checkpoint(back, path)
    assert path.read_bytes() == raw
