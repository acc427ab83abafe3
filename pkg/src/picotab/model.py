"""Dual-attention in-context transformer over feature-group tokens.

Token grid layout is ``[batch, rows, columns, dim]``: rows are thinking rows,
then context (train) rows, then test rows; columns are the feature groups
followed by one target column.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import ndtri
from torch import nn

from picotab import io

FULL_SCALE = {  # reference configuration of the full-size model; the desk model scales it down
    "depth_regression": 18,
    "depth_classification": 24,
    "group_size": 3,
    "n_thinking": 64,
    "feature_cap": 500,
}


class EmptyInputError(ValueError):
    pass


class InvalidTargetError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 3
    dim: int = 64
    heads: int = 4
    group_size: int = 3
    n_thinking: int = 8
    max_classes: int = 10
    n_bins: int = 32
    feature_cap: int = 500
    ffn_mult: int = 4
    pos_dim: int = 16
    test_chunk: int = 32

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.group_size < 1 or self.n_thinking < 0 or self.n_bins < 2 or self.max_classes < 2:
            raise ValueError(f"invalid model config {self}")

    def n_groups(self, n_features: int) -> int:
        return -(-n_features // self.group_size)


# ---------------------------------------------------------------------------
# regression bins


@dataclass(frozen=True)
class BinSpec:
    """Bin borders in z-space of the training target plus the z-scoring constants."""

    borders: np.ndarray  # [K + 1], borders[0] = -inf, borders[K] = +inf
    y_mean: float = 0.0
    y_std: float = 1.0

    @property
    def n_bins(self) -> int:
        return len(self.borders) - 1

    @property
    def centers(self) -> np.ndarray:
        b = self.borders
        c = (b[:-1] + b[1:]) / 2
        c[0], c[-1] = b[1], b[-2]
        return c


def standard_bin_spec(n_bins: int, y_mean: float = 0.0, y_std: float = 1.0) -> BinSpec:
    """Borders at standard-normal equal-probability quantiles."""
    inner = ndtri(np.arange(1, n_bins) / n_bins)
    inner = (inner - inner[::-1]) / 2  # exact symmetry
    borders = np.concatenate([[-np.inf], inner, [np.inf]])
    return BinSpec(borders=borders, y_mean=float(y_mean), y_std=float(y_std))


def bin_targets(y, spec: BinSpec) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if not np.isfinite(y).all():
        raise InvalidTargetError("regression targets must be finite")
    z = (y - spec.y_mean) / spec.y_std
    idx = np.searchsorted(spec.borders, z, side="right") - 1
    return np.clip(idx, 0, spec.n_bins - 1)


def distribution_to_point(probs, spec: BinSpec) -> np.ndarray:
    """Mean of the piecewise-constant distribution, mapped back to target units."""
    z = np.asarray(probs) @ spec.centers
    return spec.y_mean + spec.y_std * z


# ---------------------------------------------------------------------------
# inputs


def group_features(values: torch.Tensor, missing: torch.Tensor, group_size: int) -> torch.Tensor:
    """[B, n, c] values/flags -> [B, n, G, 2g + 1] group inputs.

    Slots added to reach a multiple of ``group_size`` are zero with missing
    flag 1; the last entry of a group is 1 iff the whole group is padding.
    """
    b, n, c = values.shape
    if c == 0:
        raise EmptyInputError("at least one feature is required")
    g = group_size
    pad = (-c) % g
    if pad:
        values = F.pad(values, (0, pad))
        missing = F.pad(missing, (0, pad), value=1.0)
    groups = (c + pad) // g
    v = values.reshape(b, n, groups, g)
    m = missing.reshape(b, n, groups, g)
    pad_flag = torch.zeros(b, n, groups, 1, dtype=values.dtype)
    return torch.cat([v, m, pad_flag], dim=-1)


def pad_groups(groups: torch.Tensor, n_groups: int) -> torch.Tensor:
    """Append whole padding groups (flag set) up to ``n_groups``."""
    b, n, have, width = groups.shape
    if have >= n_groups:
        return groups
    extra = torch.zeros(b, n, n_groups - have, width, dtype=groups.dtype)
    g = (width - 1) // 2
    extra[..., g:2 * g] = 1.0
    extra[..., -1] = 1.0
    return torch.cat([groups, extra], dim=2)


def positional_vectors(n_groups: int, seed: int, pos_dim: int, dtype=torch.float32) -> torch.Tensor:
    """Random per-group vectors drawn from ``seed``; [n_groups, pos_dim]."""
    gen = torch.Generator().manual_seed(int(seed) % (2**63))
    return torch.randn(n_groups, pos_dim, generator=gen, dtype=torch.float64).to(dtype)


# ---------------------------------------------------------------------------
# network


def _mlp(d_in: int, d_hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.GELU(), nn.Linear(d_hidden, d_out))


CTX_QUERY_BLOCK = 1024


class DualAttentionBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_mult: int):
        super().__init__()
        self.heads = heads
        self.row_norm = nn.LayerNorm(dim)
        self.row_qkv = nn.Linear(dim, 3 * dim)
        self.row_out = nn.Linear(dim, dim)
        self.feat_norm = nn.LayerNorm(dim)
        self.feat_qkv = nn.Linear(dim, 3 * dim)
        self.feat_out = nn.Linear(dim, dim)
        self.ffn_norm = nn.LayerNorm(dim)
        self.ffn = _mlp(dim, ffn_mult * dim, dim)

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        # [B, n, T, D] -> [B, T, H, n, dh]
        b, n, cols, d = t.shape
        return t.reshape(b, n, cols, self.heads, d // self.heads).permute(0, 2, 3, 1, 4)

    def _merge(self, t: torch.Tensor) -> torch.Tensor:
        b, cols, h, n, dh = t.shape
        return t.permute(0, 3, 1, 2, 4).reshape(b, n, cols, h * dh)

    def row_kv(self, h: torch.Tensor):
        q, k, v = self.row_qkv(self.row_norm(h)).chunk(3, dim=-1)
        return self._split(q), self._split(k), self._split(v)

    def context_row_attention(self, h_ctx: torch.Tensor):
        """Context rows attend among themselves; returns (update, k, v)."""
        q, k, v = self.row_kv(h_ctx)
        # query blocks bound the score matrix for large contexts
        step = CTX_QUERY_BLOCK
        out = torch.cat([F.scaled_dot_product_attention(q[..., i:i + step, :], k, v)
                         for i in range(0, q.shape[-2], step)], dim=-2)
        return self.row_out(self._merge(out)), k, v

    def test_row_attention(self, h_test: torch.Tensor, k_ctx: torch.Tensor, v_ctx: torch.Tensor):
        """Each test row attends to the context rows and to itself only."""
        q, k, v = self.row_kv(h_test)
        scale = 1.0 / math.sqrt(q.shape[-1])
        s_ctx = torch.matmul(q, k_ctx.transpose(-1, -2)) * scale
        s_self = (q * k).sum(-1, keepdim=True) * scale
        m = torch.maximum(s_ctx.amax(-1, keepdim=True), s_self)
        p_ctx = torch.exp(s_ctx - m)
        p_self = torch.exp(s_self - m)
        out = (torch.matmul(p_ctx, v_ctx) + p_self * v) / (p_ctx.sum(-1, keepdim=True) + p_self)
        return self.row_out(self._merge(out))

    def feature_attention(self, h: torch.Tensor) -> torch.Tensor:
        b, n, cols, d = h.shape
        q, k, v = self.feat_qkv(self.feat_norm(h)).chunk(3, dim=-1)

        def split(t):
            return t.reshape(b * n, cols, self.heads, d // self.heads).transpose(1, 2)

        out = F.scaled_dot_product_attention(split(q), split(k), split(v))
        return self.feat_out(out.transpose(1, 2).reshape(b, n, cols, d))

    def finish(self, h: torch.Tensor) -> torch.Tensor:
        h = h + self.feature_attention(h)
        return h + self.ffn(self.ffn_norm(h))


@dataclass
class ContextCache:
    """Per-layer row-attention keys/values of thinking + context rows."""

    keys: list[torch.Tensor]
    values: list[torch.Tensor]
    n_groups: int
    kind: str
    positions: torch.Tensor = field(repr=False, default=None)

    def nbytes(self) -> int:
        return sum(t.numel() * t.element_size() for t in [*self.keys, *self.values])


class TabularTransformer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d, g = config.dim, config.group_size
        self.feature_encoder = _mlp(2 * g + 1, d, d)
        self.position_proj = nn.Linear(config.pos_dim, d, bias=False)
        self.class_embedding = nn.Embedding(config.max_classes, d)
        self.regression_encoder = _mlp(1, d, d)
        self.unknown_target = nn.Parameter(0.02 * torch.randn(d))
        if config.n_thinking > 0:
            self.thinking = nn.Parameter(0.02 * torch.randn(config.n_thinking, d))
        else:
            self.register_parameter("thinking", None)
        self.blocks = nn.ModuleList(DualAttentionBlock(d, config.heads, config.ffn_mult) for _ in range(config.depth))
        self.head_norm = nn.LayerNorm(d)
        self.class_head = nn.Linear(d, config.max_classes)
        self.bin_head = nn.Linear(d, config.n_bins)

    # -- embedding ----------------------------------------------------------

    def embed_features(self, groups: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """[B, n, G, 2g+1] -> [B, n, G, D] with per-group positional embeddings added."""
        pos = self.position_proj(positions)
        if pos.dim() == 2:
            pos = pos.unsqueeze(0)
        return self.feature_encoder(groups) + pos.unsqueeze(1)

    def embed_targets(self, y: torch.Tensor, kind: str) -> torch.Tensor:
        if kind == "classification":
            return self.class_embedding(y.long())
        return self.regression_encoder(y.unsqueeze(-1).to(self.unknown_target.dtype))

    def embed_context(self, groups, y, kind, positions) -> torch.Tensor:
        """Thinking rows followed by context rows: [B, R + n_ctx, G + 1, D]."""
        feats = self.embed_features(groups, positions)
        tokens = torch.cat([feats, self.embed_targets(y, kind).unsqueeze(2)], dim=2)
        if self.thinking is not None:
            b, _, cols, d = tokens.shape
            think = self.thinking[None, :, None, :].expand(b, -1, cols, -1)
            tokens = torch.cat([think, tokens], dim=1)
        return tokens

    def embed_test(self, groups, positions) -> torch.Tensor:
        feats = self.embed_features(groups, positions)
        unknown = self.unknown_target.expand(*feats.shape[:2], 1, -1)
        return torch.cat([feats, unknown], dim=2)

    # -- passes -------------------------------------------------------------

    def build_cache(self, groups_ctx, y_ctx, kind: str, positions) -> ContextCache:
        h = self.embed_context(groups_ctx, y_ctx, kind, positions)
        keys, values = [], []
        last = len(self.blocks) - 1
        for i, block in enumerate(self.blocks):
            upd, k, v = block.context_row_attention(h)
            keys.append(k)
            values.append(v)
            if i < last:
                h = block.finish(h + upd)
        return ContextCache(keys=keys, values=values, n_groups=groups_ctx.shape[2], kind=kind, positions=positions)

    def _test_logits(self, groups_test, cache: ContextCache) -> torch.Tensor:
        h = self.embed_test(groups_test, cache.positions)
        for block, k, v in zip(self.blocks, cache.keys, cache.values):
            h = block.finish(h + block.test_row_attention(h, k, v))
        out = self.head_norm(h[:, :, -1])
        return self.class_head(out) if cache.kind == "classification" else self.bin_head(out)

    def forward_cached(self, groups_test, cache: ContextCache, chunk: int | None = None) -> torch.Tensor:
        """Test logits [B, n_test, C or K] from a context cache.

        With ``chunk``, test rows run in zero-padded blocks of that fixed size,
        which makes each row's output bitwise independent of the other rows.
        """
        if groups_test.shape[2] != cache.n_groups:
            raise ValueError("test feature groups do not match the cached context")
        if chunk is None:
            return self._test_logits(groups_test, cache)
        n = groups_test.shape[1]
        outs = []
        for start in range(0, n, chunk):
            block = groups_test[:, start:start + chunk]
            m = block.shape[1]
            if m < chunk:
                block = torch.cat([block, block.new_zeros(block.shape[0], chunk - m, *block.shape[2:])], dim=1)
            outs.append(self._test_logits(block, cache)[:, :m])
        if not outs:
            width = self.config.max_classes if cache.kind == "classification" else self.config.n_bins
            return groups_test.new_zeros(groups_test.shape[0], 0, width)
        return torch.cat(outs, dim=1)

    def forward(self, groups_ctx, y_ctx, groups_test, kind: str, positions, chunk: int | None = None):
        return self.forward_cached(groups_test, self.build_cache(groups_ctx, y_ctx, kind, positions), chunk)

    # -- persistence --------------------------------------------------------

    def to_container(self, extra_header: dict | None = None) -> io.Container:
        header = {"kind": "model"}
        header.update(io.dataclass_to_header(self.config, "model."))
        header.update(extra_header or {})
        tensors = {k: v.detach().cpu().float().numpy() for k, v in self.state_dict().items()}
        return io.Container(header=header, tensors=tensors)

    @classmethod
    def from_container(cls, container: io.Container) -> TabularTransformer:
        if container.header.get("kind") != "model":
            raise io.CheckpointFormatError(f"expected a model checkpoint, got kind={container.header.get('kind')!r}")
        config = io.header_to_dataclass(ModelConfig, container.header, "model.")
        model = cls(config)
        state = {k[len("param."):] if k.startswith("param.") else k: torch.from_numpy(v.copy())
                 for k, v in container.tensors.items() if not k.startswith("optim.")}
        model.load_state_dict(state)
        model.eval()
        return model


def load_model(path) -> TabularTransformer:
    return TabularTransformer.from_container(io.load_checkpoint(path))


def save_model(model: TabularTransformer, path) -> None:
    io.save_checkpoint(model.to_container(), path)


def loss(logits: torch.Tensor, targets: torch.Tensor, kind: str, n_classes=None) -> torch.Tensor:
    """Mean cross-entropy over test positions; class slots >= n_classes are masked out.

    ``logits`` [B, n, W], ``targets`` [B, n]; ``n_classes`` scalar or [B].
    """
    if kind == "classification" and n_classes is not None:
        n_classes = torch.as_tensor(n_classes).reshape(-1, 1, 1)
        slots = torch.arange(logits.shape[-1]).reshape(1, 1, -1)
        logits = logits.masked_fill(slots >= n_classes, float("-inf"))
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1).long())
