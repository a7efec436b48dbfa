"""Local self-attention, neighborhood aggregation and keypoint cross-attention."""

from __future__ import annotations

import enum

import numpy as np

from .nn import functional as F
from .nn.modules import BatchNorm, Linear, Module, Parameter, SharedMLP, kaiming_uniform
from .nn.tensor import Tensor, as_tensor, broadcast_to, concat, matmul


class FeatureMode(str, enum.Enum):
    """Which features feed the inner self-attention of a neighborhood."""

    NEIGHBOR = "neighbor"
    DIFF = "diff"
    DIFF_NEIGHBOR = "diff_neighbor"
    DIFF_KEY = "diff_key"
    DIFF_KEY_NEIGHBOR = "diff_key_neighbor"

    @property
    def width_factor(self) -> int:
        return {"neighbor": 1, "diff": 1, "diff_neighbor": 2, "diff_key": 2, "diff_key_neighbor": 3}[self.value]


class Aggregation(str, enum.Enum):
    MAX = "max"
    MEAN = "mean"
    MAX_MINUS_MEAN = "max_minus_mean"
    MAX_CONCAT_MEAN = "max_concat_mean"


def build_neighborhood_features(neighbor_feats, keypoint_feat, mode: FeatureMode = FeatureMode.DIFF_KEY) -> Tensor:
    """Concatenate per-neighbor inputs for attention.

    ``neighbor_feats`` is ``(..., K, Cin)`` and ``keypoint_feat`` is
    ``(..., 1, Cin)``. The default mode yields ``[F - f_k, f_k]``.
    """
    mode = FeatureMode(mode)
    nbr = as_tensor(neighbor_feats)
    key = as_tensor(keypoint_feat)
    if mode is FeatureMode.NEIGHBOR:
        return nbr
    diff = nbr - key
    if mode is FeatureMode.DIFF:
        return diff
    if mode is FeatureMode.DIFF_NEIGHBOR:
        return concat([diff, nbr], axis=-1)
    key_b = broadcast_to(key, nbr.shape)
    if mode is FeatureMode.DIFF_KEY:
        return concat([diff, key_b], axis=-1)
    return concat([diff, key_b, nbr], axis=-1)


def canonical_row_order(x: np.ndarray) -> np.ndarray:
    """Per-slice canonical order of the rows of ``x (..., K, W)``.

    Rows are compared by their raw bytes, so identical row sets get identical
    sorted layouts whatever the input order. Running a row-reducing
    computation in this order makes it bitwise permutation equivariant.
    """
    K, W = x.shape[-2:]
    flat = np.ascontiguousarray(x.reshape(-1, K, W))
    keys = flat.view(np.dtype((np.void, W * flat.itemsize))).reshape(flat.shape[0], K)
    return np.argsort(keys, axis=1, kind="stable").reshape(*x.shape[:-2], K)


def _attend(q: Tensor, k: Tensor, v: Tensor, scaled: bool, drop_p: float = 0.0,
            training: bool = False, rng=None) -> tuple[Tensor, Tensor]:
    logits = matmul(q, k.swapaxes(-1, -2))
    if scaled:
        logits = logits * (1.0 / np.sqrt(q.shape[-1]))
    A = F.softmax_rows(logits)
    out = matmul(F.dropout(A, drop_p, training, rng), v)
    return out, A


class InnerSelfAttention(Module):
    """Single-head self-attention inside each neighborhood.

    Input ``(..., K, width)`` -> ``(..., K, Cout)``: ``A = softmax(Q K^T)``,
    ``F_s = A V``, then pointwise linear, batch norm and activation.
    """

    def __init__(self, width: int, cout: int, rng: np.random.Generator, scaled_logits: bool = False):
        self.width = width
        self.scaled_logits = scaled_logits
        self.Wq = Parameter(kaiming_uniform(rng, (width, cout), width))
        self.Wk = Parameter(kaiming_uniform(rng, (width, cout), width))
        self.Wv = Parameter(kaiming_uniform(rng, (width, cout), width))
        self.post = Linear(cout, cout, rng)
        self.bn = BatchNorm(cout)
        self.last_attention: np.ndarray | None = None

    def forward(self, nf: Tensor) -> Tensor:
        nf = as_tensor(nf)
        if nf.shape[-1] != self.width:
            raise ValueError(f"inner attention expects width {self.width}, got {nf.shape[-1]}")
        order = canonical_row_order(nf.data)
        x = F.permute_along(nf, order[..., None], axis=-2)
        q = F.linear(x, self.Wq)
        k = F.linear(x, self.Wk)
        v = F.linear(x, self.Wv)
        att, A = _attend(q, k, v, self.scaled_logits)
        inv = np.argsort(order, axis=-1)
        self.last_attention = np.take_along_axis(
            np.take_along_axis(A.data, inv[..., None], axis=-2), inv[..., None, :], axis=-1)
        y = F.activation(self.bn(self.post(att)))
        return F.permute_along(y, inv[..., None], axis=-2)


class MiddleAggregation(Module):
    """Reduce ``(..., K, C)`` neighborhood features to ``(..., C)`` keypoint features."""

    def __init__(self, cout: int, rng: np.random.Generator, agg: Aggregation = Aggregation.MAX_CONCAT_MEAN):
        self.agg = Aggregation(agg)
        cin = 2 * cout if self.agg is Aggregation.MAX_CONCAT_MEAN else cout
        self.mlp = SharedMLP(cin, cout, rng)

    def pooled(self, x: Tensor) -> Tensor:
        if self.agg is Aggregation.MAX:
            return F.pool_max(x, axis=-2, keepdims=False)
        if self.agg is Aggregation.MEAN:
            return F.pool_mean(x, axis=-2, keepdims=False)
        mx = F.pool_max(x, axis=-2, keepdims=False)
        mn = F.pool_mean(x, axis=-2, keepdims=False)
        if self.agg is Aggregation.MAX_MINUS_MEAN:
            return mx - mn
        return concat([mx, mn], axis=-1)

    def forward(self, x: Tensor) -> Tensor:
        return self.mlp(self.pooled(as_tensor(x)))


class OuterCrossAttention(Module):
    """Multi-head cross-attention between keypoints.

    Queries come from the initial keypoint features ``(B, M, Cin)``; keys and
    values from the aggregated keypoint features ``(B, M, Cout)``. Attention
    weights are dropped out (not renormalized) in train mode.
    """

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, heads: int = 8,
                 dropout: float = 0.5, scaled_logits: bool = False):
        if cout % heads:
            raise ValueError(f"output channels {cout} not divisible by {heads} heads")
        self.heads = heads
        self.dropout_p = dropout
        self.scaled_logits = scaled_logits
        self.Wq = Parameter(kaiming_uniform(rng, (cin, cout), cin))
        self.Wk = Parameter(kaiming_uniform(rng, (cout, cout), cout))
        self.Wv = Parameter(kaiming_uniform(rng, (cout, cout), cout))
        self.out = Linear(cout, cout, rng)

    def _split(self, x: Tensor) -> Tensor:
        B, M, C = x.shape
        return x.reshape(B, M, self.heads, C // self.heads).transpose(0, 2, 1, 3)

    def forward(self, F_k: Tensor, F_k_new: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        F_k, F_k_new = as_tensor(F_k), as_tensor(F_k_new)
        if F_k.shape[:-1] != F_k_new.shape[:-1]:
            raise ValueError(f"keypoint shapes differ: {F_k.shape} vs {F_k_new.shape}")
        B, M, C = F_k_new.shape
        q = self._split(F.linear(F_k, self.Wq))
        k = self._split(F.linear(F_k_new, self.Wk))
        v = self._split(F.linear(F_k_new, self.Wv))
        heads, _ = _attend(q, k, v, self.scaled_logits, self.dropout_p, self.training, rng)
        merged = heads.transpose(0, 2, 1, 3).reshape(B, M, C)
        return self.out(merged)
