"""Linear attention, linear-transformer encoder layers, and the bidirectional aggregator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ConvBnRelu, LayerNorm, Linear, Module
from .tensor import Tensor, concat, div, elu, expand, matmul, relu, reshape, sum_, transpose


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int = 128
    heads: int = 4
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if self.epsilon <= 0:
            raise ValueError("attention epsilon must be positive")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


@dataclass
class SequenceFeature:
    """Tokens (N, H*W, C) flattened from an (N, C, H, W) map, plus the grid size."""

    tokens: Tensor
    height: int
    width: int

    @classmethod
    def from_map(cls, x: Tensor) -> "SequenceFeature":
        n, c, h, w = x.shape
        return cls(transpose(reshape(x, (n, c, h * w)), (0, 2, 1)), h, w)

    def to_map(self) -> Tensor:
        n, length, c = self.tokens.shape
        if length != self.height * self.width:
            raise ValueError(f"token count {length} != {self.height}x{self.width}")
        return reshape(transpose(self.tokens, (0, 2, 1)), (n, c, self.height, self.width))


def feature_map(x: Tensor) -> Tensor:
    """Positive kernel feature map elu(x) + 1."""
    return elu(x) + 1.0


def linear_attention(q: Tensor, k: Tensor, v: Tensor, epsilon: float = 1e-6) -> Tensor:
    """Kernelized attention in O(L) memory over keys.

    Shapes: q (N, heads, Lq, d), k (N, heads, Lk, d), v (N, heads, Lk, dv).
    The (Lq, Lk) score matrix is never formed: phi(K)^T V and sum_j phi(K_j)
    are reduced first.
    """
    if q.ndim != 4 or k.ndim != 4 or v.ndim != 4:
        raise ValueError("linear_attention expects (N, heads, L, d) operands")
    if q.shape[:2] != k.shape[:2] or k.shape[:2] != v.shape[:2]:
        raise ValueError(f"batch/head mismatch: {q.shape}, {k.shape}, {v.shape}")
    if q.shape[3] != k.shape[3]:
        raise ValueError(f"query/key width mismatch: {q.shape[3]} vs {k.shape[3]}")
    if k.shape[2] != v.shape[2]:
        raise ValueError(f"key/value length mismatch: {k.shape[2]} vs {v.shape[2]}")
    phi_q = feature_map(q)
    phi_k = feature_map(k)
    kv = matmul(transpose(phi_k, (0, 1, 3, 2)), v)  # (N, h, d, dv)
    numer = matmul(phi_q, kv)  # (N, h, Lq, dv)
    k_sum = transpose(sum_(phi_k, axis=2, keepdims=True), (0, 1, 3, 2))  # (N, h, d, 1)
    denom = matmul(phi_q, k_sum) + epsilon  # (N, h, Lq, 1)
    return div(numer, expand(denom, numer.shape))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, length, d = x.shape
    return transpose(reshape(x, (n, length, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    n, h, length, d = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (n, length, h * d))


class LinearTransformerEncoder(Module):
    """Cross-attention encoder layer: queries from ``x``, keys/values from ``source``.

    out = x + MLP(LN(concat(x, merge(attn(LN(x), LN(source))))))
    """

    def __init__(self, cfg: AttentionConfig, rng=None, dtype=np.float32):
        d = cfg.model_dim
        self.cfg = cfg
        self.norm_query = LayerNorm(d, dtype)
        self.norm_source = LayerNorm(d, dtype)
        self.q_proj = Linear(d, d, rng=rng, dtype=dtype)
        self.k_proj = Linear(d, d, rng=rng, dtype=dtype)
        self.v_proj = Linear(d, d, rng=rng, dtype=dtype)
        self.merge = Linear(d, d, rng=rng, dtype=dtype)
        self.norm_mlp = LayerNorm(2 * d, dtype)
        self.mlp_hidden = Linear(2 * d, 2 * d, rng=rng, dtype=dtype)
        self.mlp_out = Linear(2 * d, d, rng=rng, dtype=dtype)

    def forward(self, x: Tensor, source: Tensor) -> Tensor:
        d = self.cfg.model_dim
        if x.shape[-1] != d or source.shape[-1] != d:
            raise ValueError(f"encoder expects model_dim {d}, got {x.shape[-1]} and {source.shape[-1]}")
        if x.shape[0] != source.shape[0]:
            raise ValueError("encoder inputs disagree on batch size")
        h = self.cfg.heads
        xq = self.norm_query(x)
        xs = self.norm_source(source)
        q = _split_heads(self.q_proj(xq), h)
        k = _split_heads(self.k_proj(xs), h)
        v = _split_heads(self.v_proj(xs), h)
        message = self.merge(_merge_heads(linear_attention(q, k, v, self.cfg.epsilon)))
        hidden = self.norm_mlp(concat([x, message], axis=2))
        return x + self.mlp_out(relu(self.mlp_hidden(hidden)))


def ltr_encoder(x: SequenceFeature, source: SequenceFeature, encoder: LinearTransformerEncoder) -> SequenceFeature:
    return SequenceFeature(encoder(x.tokens, source.tokens), x.height, x.width)


class TRFA(Module):
    """Bidirectional cross-attention between context (D5) and edge (E6) features."""

    def __init__(self, cfg: AttentionConfig, rng=None, dtype=np.float32):
        self.cfg = cfg
        self.context_to_edge = LinearTransformerEncoder(cfg, rng, dtype)
        self.edge_to_context = LinearTransformerEncoder(cfg, rng, dtype)
        self.aggregate = ConvBnRelu(2 * cfg.model_dim, cfg.model_dim, 1, rng=rng, dtype=dtype)

    def branches(self, d5: Tensor, e6: Tensor) -> tuple[Tensor, Tensor]:
        if d5.shape != e6.shape:
            raise ValueError(f"TRFA inputs must share a shape, got {d5.shape} and {e6.shape}")
        if d5.shape[1] != self.cfg.model_dim:
            raise ValueError(f"TRFA expects {self.cfg.model_dim} channels, got {d5.shape[1]}")
        sd, se = SequenceFeature.from_map(d5), SequenceFeature.from_map(e6)
        a = ltr_encoder(sd, se, self.context_to_edge).to_map()
        b = ltr_encoder(se, sd, self.edge_to_context).to_map()
        return a, b

    def forward(self, d5: Tensor, e6: Tensor) -> Tensor:
        a, b = self.branches(d5, e6)
        return self.aggregate(concat([a, b], axis=1))
