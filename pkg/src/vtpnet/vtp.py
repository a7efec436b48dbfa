"""The VTP block: voxel branch, point-transformer branch and point branch."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import geometry as G
from .attention import (
    Aggregation,
    FeatureMode,
    InnerSelfAttention,
    MiddleAggregation,
    OuterCrossAttention,
    build_neighborhood_features,
)
from .nn import functional as F
from .nn.modules import BatchNorm, Conv3d, Linear, Module
from .nn.tensor import Tensor, as_tensor, concat

FPS_SEED_POLICIES = ("random", "first", "centroid")


@dataclass(frozen=True)
class VtpConfig:
    """Hyperparameters of one block, written ``(c, R, M, r, K)``."""

    c_out: int
    R: int
    M: int
    r: float
    K: int
    feature_mode: FeatureMode = FeatureMode.DIFF_KEY
    agg: Aggregation = Aggregation.MAX_CONCAT_MEAN
    scaled_logits: bool = False
    attn_dropout: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "feature_mode", FeatureMode(self.feature_mode))
        object.__setattr__(self, "agg", Aggregation(self.agg))
        if self.c_out % 8:
            raise ValueError(f"c_out={self.c_out} must be divisible by 8 (attention heads)")
        if self.R < 2:
            raise ValueError(f"R={self.R} must be >= 2")
        if self.r <= 0:
            raise ValueError(f"r={self.r} must be positive")
        if self.K < 1 or self.M < 1:
            raise ValueError("K and M must be >= 1")
        if not 0.0 <= self.attn_dropout < 1.0:
            raise ValueError(f"attn_dropout={self.attn_dropout} must be in [0, 1)")

    @classmethod
    def of(cls, c: int, R: int, M: int, r: float, K: int, **kw) -> "VtpConfig":
        return cls(c, R, M, r, K, **kw)

    def tuple(self) -> tuple:
        return (self.c_out, self.R, self.M, self.r, self.K)

    def with_(self, **kw) -> "VtpConfig":
        return replace(self, **kw)


class VoxelBranch(Module):
    """Voxelize -> two (3x3x3 conv, BN, activation) layers -> trilinear devoxelize."""

    def __init__(self, cin: int, cfg: VtpConfig, rng: np.random.Generator):
        self.R = cfg.R
        self.conv1 = Conv3d(cin, cfg.c_out, rng)
        self.bn1 = BatchNorm(cfg.c_out)
        self.conv2 = Conv3d(cfg.c_out, cfg.c_out, rng)
        self.bn2 = BatchNorm(cfg.c_out)

    def forward(self, coords: np.ndarray, feats: Tensor) -> Tensor:
        grid = G.voxelize(coords, feats, self.R)
        B = grid.features.shape[0]
        R = self.R
        x = grid.features.reshape(B, R, R, R, -1)
        x = F.activation(self.bn1(self.conv1(x)))
        x = F.activation(self.bn2(self.conv2(x)))
        return G.devoxelize_trilinear(grid, x)


@dataclass
class Grouping:
    keypoints: np.ndarray  # (B, M)
    neighbors: np.ndarray  # (B, M, K)
    pad_counts: np.ndarray  # (B, M)


def group_points(coords: np.ndarray, cfg: VtpConfig, seeds: np.ndarray) -> Grouping:
    keys, nbrs, pads = [], [], []
    for c, s in zip(coords, seeds):
        kp = G.farthest_point_sample(c, cfg.M, int(s))
        res = G.ball_query(c, kp, cfg.r, cfg.K)
        keys.append(kp)
        nbrs.append(res.neighbor_indices)
        pads.append(res.pad_counts)
    return Grouping(np.stack(keys), np.stack(nbrs), np.stack(pads))


def fps_seeds(coords: np.ndarray, policy: str, rng: np.random.Generator | None) -> np.ndarray:
    B, N, _ = coords.shape
    if policy == "random":
        if rng is None:
            raise ValueError("random FPS seeding needs an rng")
        return rng.integers(0, N, size=B)
    if policy == "first":
        return np.zeros(B, dtype=np.int64)
    if policy == "centroid":
        return np.array([G.centroid_seed(c) for c in coords], dtype=np.int64)
    raise ValueError(f"unknown FPS seed policy {policy!r}")


class PointTransformerBranch(Module):
    """Sample/group -> inner self-attention -> aggregation -> cross-attention -> 3-NN upsample."""

    def __init__(self, cin: int, cfg: VtpConfig, rng: np.random.Generator):
        self.cfg = cfg
        width = cfg.feature_mode.width_factor * cin
        self.inner = InnerSelfAttention(width, cfg.c_out, rng, cfg.scaled_logits)
        self.agg = MiddleAggregation(cfg.c_out, rng, cfg.agg)
        self.cross = OuterCrossAttention(cin, cfg.c_out, rng, dropout=cfg.attn_dropout,
                                         scaled_logits=cfg.scaled_logits)

    def forward(self, coords: np.ndarray, feats: Tensor, grouping: Grouping,
                rng: np.random.Generator | None = None) -> Tensor:
        F_k = F.gather(feats, grouping.keypoints)  # (B, M, Cin)
        F_nbr = F.gather(feats, grouping.neighbors)  # (B, M, K, Cin)
        B, M, cin = F_k.shape
        nf = build_neighborhood_features(F_nbr, F_k.reshape(B, M, 1, cin), self.cfg.feature_mode)
        updated = self.inner(nf)  # (B, M, K, c)
        F_k_new = self.agg(updated)  # (B, M, c)
        F_k_out = self.cross(F_k, F_k_new, rng)
        key_coords = np.take_along_axis(coords, grouping.keypoints[..., None], axis=1)
        return G.interpolate_3nn(key_coords, F_k_out, coords)


class PointBranch(Module):
    """Pointwise linear -> BN -> activation over the block input."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.linear = Linear(cin, cout, rng)
        self.bn = BatchNorm(cout)

    def forward(self, feats: Tensor) -> Tensor:
        return F.activation(self.bn(self.linear(feats)))


class VtpBlock(Module):
    """``F_out = fuse([F_V, F_PT]) + F_global`` for features ``(B, N, Cin)``."""

    def __init__(self, cin: int, cfg: VtpConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.cin = cin
        self.voxel = VoxelBranch(cin, cfg, rng)
        self.pt = PointTransformerBranch(cin, cfg, rng)
        self.point = PointBranch(cin, cfg.c_out, rng)
        self.fuse = Linear(2 * cfg.c_out, cfg.c_out, rng)
        self.last_grouping: Grouping | None = None

    def forward(self, coords: np.ndarray, feats, rng: np.random.Generator | None = None,
                fps_seed: str | None = None, return_parts: bool = False):
        coords = np.asarray(coords)
        feats = as_tensor(feats)
        if feats.ndim == 2:
            coords, feats = coords[None], feats.reshape(1, *feats.shape)
            single = True
        else:
            single = False
        if feats.shape[-1] != self.cin:
            raise ValueError(f"block expects {self.cin} input channels, got {feats.shape[-1]}")
        N = coords.shape[1]
        if self.cfg.M > N:
            raise ValueError(f"M={self.cfg.M} keypoints requested from N={N} points")
        policy = fps_seed or ("random" if self.training else "first")
        grouping = group_points(coords, self.cfg, fps_seeds(coords, policy, rng))
        self.last_grouping = grouping

        f_v = self.voxel(coords, feats)
        f_pt = self.pt(coords, feats, grouping, rng)
        f_global = self.point(feats)
        f_local = self.fuse(concat([f_v, f_pt], axis=-1))
        out = f_local + f_global
        if single:
            out = out.reshape(out.shape[1:])
            f_v, f_pt, f_global, f_local = (t.reshape(t.shape[1:]) for t in (f_v, f_pt, f_global, f_local))
        if return_parts:
            return out, {"F_V": f_v, "F_PT": f_pt, "F_global": f_global, "F_local": f_local}
        return out
