"""Backbones and heads for part segmentation and shape classification."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import functional as F
from .nn.modules import Linear, Module, SharedMLP, count_parameters
from .nn.tensor import Tensor, broadcast_to, concat
from .vtp import VtpBlock, VtpConfig

__all__ = [
    "ClsNet", "ClsNetConfig", "SegNet", "SegNetConfig", "count_parameters",
    "canonical_point_order", "paper_cls_config", "paper_seg_config",
    "desk_cls_config", "desk_seg_config",
]


def _blocks(*tuples, **kw) -> tuple[VtpConfig, ...]:
    return tuple(VtpConfig.of(*t, **kw) for t in tuples)


PAPER_SEG_BLOCKS = _blocks((64, 32, 50, 0.06, 45), (128, 16, 400, 0.03, 6), (64, 32, 50, 0.06, 45))
PAPER_CLS_BLOCKS = _blocks(
    (64, 32, 100, 0.03, 45), (128, 16, 800, 0.01, 6), (64, 32, 100, 0.03, 45),
    (128, 16, 800, 0.01, 6), (64, 32, 100, 0.03, 45),
)
# Desk scale: half the channels, coarser grids, M <= N/4 for N=256 clouds
# normalized to the unit sphere. Attention dropout is off: with few BN
# updates per epoch, dropout upstream of BN leaves running variances that
# badly mismatch eval-mode activations.
DESK_SEG_BLOCKS = _blocks((32, 8, 16, 0.4, 16), (64, 4, 64, 0.2, 6), (32, 8, 16, 0.4, 16),
                          attn_dropout=0.0)
DESK_CLS_BLOCKS = _blocks(
    (32, 8, 16, 0.4, 16), (64, 4, 64, 0.2, 6), (32, 8, 16, 0.4, 16),
    (64, 4, 64, 0.2, 6), (32, 8, 16, 0.4, 16), attn_dropout=0.0,
)


@dataclass
class SegNetConfig:
    blocks: tuple[VtpConfig, ...]
    num_parts: int
    num_categories: int
    mlp_dims: tuple[int, int] = (512, 2048)
    head_dims: tuple[int, int] = (512, 256)
    dropout: float = 0.5
    skip_all_blocks: bool = True
    in_channels: int = 6
    train_fps_seed: str = "random"


@dataclass
class ClsNetConfig:
    blocks: tuple[VtpConfig, ...]
    num_classes: int
    head_dims: tuple[int, int] = (512, 256)
    dropout: float = 0.5
    in_channels: int = 6
    train_fps_seed: str = "random"


def paper_seg_config(num_parts: int = 50, num_categories: int = 16) -> SegNetConfig:
    return SegNetConfig(PAPER_SEG_BLOCKS, num_parts, num_categories)


def paper_cls_config(num_classes: int = 40) -> ClsNetConfig:
    return ClsNetConfig(PAPER_CLS_BLOCKS, num_classes)


def desk_seg_config(num_parts: int, num_categories: int) -> SegNetConfig:
    return SegNetConfig(DESK_SEG_BLOCKS, num_parts, num_categories, mlp_dims=(256, 1024), head_dims=(256, 128))


def desk_cls_config(num_classes: int) -> ClsNetConfig:
    return ClsNetConfig(DESK_CLS_BLOCKS, num_classes, head_dims=(256, 128))


def canonical_point_order(coords: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Lexicographic order on (x, y, z, nx, ny, nz) for each cloud in a batch.

    Evaluating the network in this order makes every internal reduction see
    the same sequence regardless of how the input points were listed.
    """
    keys = np.concatenate([coords, normals], axis=-1)
    return np.stack([np.lexsort(k.T[::-1]) for k in keys])


def _build_backbone(cin: int, blocks, rng) -> tuple[list[VtpBlock], list[int]]:
    out, widths = [], []
    for cfg in blocks:
        out.append(VtpBlock(cin, cfg, rng))
        cin = cfg.c_out
        widths.append(cin)
    return out, widths


class _Net(Module):
    fps_seed_eval = "centroid"

    def _prepare(self, coords, normals):
        coords = np.asarray(coords, dtype=np.float64)
        normals = np.asarray(normals, dtype=np.float64)
        if coords.ndim == 2:
            coords, normals = coords[None], normals[None]
        if normals.shape != coords.shape:
            raise ValueError("the network needs per-point normals matching the coordinates")
        order = canonical_point_order(coords, normals)
        coords = np.take_along_axis(coords, order[..., None], axis=1)
        normals = np.take_along_axis(normals, order[..., None], axis=1)
        dtype = self.blocks[0].fuse.weight.dtype
        feats = Tensor(np.concatenate([coords, normals], axis=-1).astype(dtype))
        return order, coords, feats

    def _run_blocks(self, coords, feats, rng):
        policy = self.cfg.train_fps_seed if self.training else self.fps_seed_eval
        outs = []
        for block in self.blocks:
            feats = block(coords, feats, rng=rng, fps_seed=policy)
            outs.append(feats)
        return outs


class SegNet(_Net):
    """Three VTP blocks, two MLPs, a max-pooled global vector and a per-point head."""

    def __init__(self, cfg: SegNetConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.blocks, widths = _build_backbone(cfg.in_channels, cfg.blocks, rng)
        self.mlp1 = SharedMLP(widths[-1], cfg.mlp_dims[0], rng)
        self.mlp2 = SharedMLP(cfg.mlp_dims[0], cfg.mlp_dims[1], rng)
        skip = sum(widths) if cfg.skip_all_blocks else widths[-1]
        head_in = cfg.mlp_dims[1] + skip + cfg.num_categories
        self.head1 = SharedMLP(head_in, cfg.head_dims[0], rng)
        self.head2 = SharedMLP(cfg.head_dims[0], cfg.head_dims[1], rng)
        self.classifier = Linear(cfg.head_dims[1], cfg.num_parts, rng)
        self.astype(dtype)

    def forward(self, coords, normals, category_onehot, rng: np.random.Generator | None = None) -> Tensor:
        """Per-point part logits ``(B, N, num_parts)`` in the caller's point order."""
        order, coords, feats = self._prepare(coords, normals)
        onehot = np.asarray(category_onehot, dtype=feats.dtype)
        if onehot.ndim == 1:
            onehot = onehot[None]
        if onehot.shape != (coords.shape[0], self.cfg.num_categories):
            raise ValueError(f"category vector shape {onehot.shape} != (B, {self.cfg.num_categories})")
        B, N, _ = coords.shape
        outs = self._run_blocks(coords, feats, rng)
        x = self.mlp2(self.mlp1(outs[-1]))
        glob = F.pool_max(x, axis=1, keepdims=True)  # (B, 1, D)
        parts = [broadcast_to(glob, (B, N, glob.shape[-1]))]
        parts += outs if self.cfg.skip_all_blocks else outs[-1:]
        parts.append(Tensor(np.broadcast_to(onehot[:, None, :], (B, N, onehot.shape[-1])).copy()))
        h = self.head1(concat(parts, axis=-1))
        h = F.dropout(self.head2(h), self.cfg.dropout, self.training, rng)
        logits = self.classifier(h)
        inverse = np.argsort(order, axis=1)
        return F.permute_along(logits, inverse[..., None], axis=1)


class ClsNet(_Net):
    """Five sequential VTP blocks, concatenated, max-pooled, then an MLP classifier."""

    def __init__(self, cfg: ClsNetConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.blocks, widths = _build_backbone(cfg.in_channels, cfg.blocks, rng)
        self.head1 = SharedMLP(sum(widths), cfg.head_dims[0], rng)
        self.head2 = SharedMLP(cfg.head_dims[0], cfg.head_dims[1], rng)
        self.classifier = Linear(cfg.head_dims[1], cfg.num_classes, rng)
        self.astype(dtype)

    def forward(self, coords, normals, rng: np.random.Generator | None = None) -> Tensor:
        """Class logits ``(B, num_classes)``."""
        _, coords, feats = self._prepare(coords, normals)
        outs = self._run_blocks(coords, feats, rng)
        pooled = F.pool_max(concat(outs, axis=-1), axis=1, keepdims=False)
        h = self.head2(self.head1(pooled))
        h = F.dropout(h, self.cfg.dropout, self.training, rng)
        return self.classifier(h)
