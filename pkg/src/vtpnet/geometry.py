"""Point-set structuring: sampling, grouping, voxelization and interpolation.

Index computations (FPS, ball query, nearest neighbors, voxel assignment) are
plain numpy and depend only on coordinates. The feature-moving parts
(voxel averaging, trilinear devoxelization, 3-NN upsampling) are
differentiable with respect to the features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import functional as F
from .nn.tensor import Tensor, as_tensor


@dataclass
class PointCloud:
    coords: np.ndarray
    normals: np.ndarray | None = None
    colors: np.ndarray | None = None
    labels: np.ndarray | None = None
    category: int | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3 or len(self.coords) < 1:
            raise ValueError(f"coords must be (N>=1, 3), got {self.coords.shape}")
        n = len(self.coords)
        for name in ("normals", "colors", "labels"):
            value = getattr(self, name)
            if value is not None and len(value) != n:
                raise ValueError(f"{name} has {len(value)} rows, expected {n}")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            norms = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-4):
                raise ValueError("normals must have unit length")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.coords)


@dataclass
class GroupingResult:
    keypoint_indices: np.ndarray
    neighbor_indices: np.ndarray
    radius: float
    pad_counts: np.ndarray


@dataclass
class VoxelGrid:
    resolution: int
    features: Tensor  # (B, R^3, C)
    norm_coords: np.ndarray  # (B, N, 3), in [0, R-1]
    counts: np.ndarray = field(repr=False)  # (B, R^3)


def _sq_dist(points: np.ndarray, p: np.ndarray) -> np.ndarray:
    d = points - p
    return (d * d).sum(axis=-1)


# -- sampling and grouping ----------------------------------------------------

def farthest_point_sample(coords: np.ndarray, M: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling starting from ``seed_index``.

    Each pick maximizes the distance to the already-picked set; ties go to the
    lowest index.
    """
    coords = np.asarray(coords)
    N = len(coords)
    if M < 1 or M > N:
        raise ValueError(f"farthest_point_sample needs 1 <= M <= N, got M={M}, N={N}")
    if not 0 <= seed_index < N:
        raise ValueError(f"seed_index {seed_index} out of range for N={N}")
    picked = np.empty(M, dtype=np.int64)
    picked[0] = seed_index
    mind = _sq_dist(coords, coords[seed_index])
    for i in range(1, M):
        nxt = int(np.argmax(mind))
        picked[i] = nxt
        np.minimum(mind, _sq_dist(coords, coords[nxt]), out=mind)
    return picked


def centroid_seed(coords: np.ndarray) -> int:
    """Index of the point nearest the centroid (lowest index on ties)."""
    return int(np.argmin(_sq_dist(coords, coords.mean(axis=0))))


def ball_query(coords: np.ndarray, keypoints: np.ndarray, r: float, K: int) -> GroupingResult:
    """Up to ``K`` points within ``r`` of each keypoint, keypoint first.

    Remaining in-radius points follow in ascending index order; short rows are
    padded with the keypoint index and ``pad_counts`` records how many.
    """
    if r <= 0 or K < 1:
        raise ValueError(f"ball_query needs r > 0 and K >= 1, got r={r}, K={K}")
    coords = np.asarray(coords)
    keypoints = np.asarray(keypoints, dtype=np.int64)
    M = len(keypoints)
    d2 = ((coords[None, :, :] - coords[keypoints][:, None, :]) ** 2).sum(-1)
    inside = d2 <= r * r
    inside[np.arange(M), keypoints] = False
    found = inside.sum(axis=1)
    nbr = np.repeat(keypoints[:, None], K, axis=1)
    if K > 1:
        # stable sort puts in-radius candidates first, in ascending index order
        slots = min(K - 1, len(coords))
        order = np.argsort(~inside, axis=1, kind="stable")[:, :slots]
        take = np.arange(slots)[None, :] < found[:, None]
        nbr[:, 1:slots + 1] = np.where(take, order, keypoints[:, None])
    pads = np.maximum(K - 1 - found, 0)
    return GroupingResult(keypoints, nbr, float(r), pads)


# -- voxelization -------------------------------------------------------------

def normalize_coords(coords: np.ndarray, R: int) -> np.ndarray:
    """Map a cloud's bounding box into ``[0, R-1]^3``.

    Uniform scale set by the longest axis, box centered in the grid; a cloud of
    zero extent maps entirely to the origin voxel.
    """
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    extent = float((hi - lo).max())
    if extent == 0.0:
        return np.zeros_like(coords, dtype=np.float64)
    mid = (lo + hi) / 2.0
    u = (coords - mid) * ((R - 1) / extent) + (R - 1) / 2.0
    return np.clip(u, 0.0, R - 1)


def _batched(coords: np.ndarray, feats) -> tuple[np.ndarray, Tensor, bool]:
    coords = np.asarray(coords)
    feats = as_tensor(feats)
    if coords.ndim == 2:
        return coords[None], feats.reshape(1, *feats.shape), True
    return coords, feats, False


def voxelize(coords: np.ndarray, features, R: int) -> VoxelGrid:
    """Average point features into a dense ``R^3`` grid.

    ``coords`` is ``(N, 3)`` or ``(B, N, 3)``; ``features`` matches with a
    trailing channel axis. Points go to the voxel of their floored normalized
    coordinates.
    """
    if R < 2:
        raise ValueError(f"voxel resolution must be >= 2, got {R}")
    coords, feats, _ = _batched(coords, features)
    B, N, _ = coords.shape
    u = np.stack([normalize_coords(c, R) for c in coords])
    ijk = np.minimum(np.floor(u).astype(np.int64), R - 1)
    cell = (ijk[..., 0] * R + ijk[..., 1]) * R + ijk[..., 2]
    # canonical in-voxel order (by coordinates) so the sum ignores input order
    order = np.stack([np.lexsort((c[:, 2], c[:, 1], c[:, 0], v)) for c, v in zip(coords, cell)])
    grid, counts = F.scatter_mean(feats, cell, R ** 3, order=order)
    return VoxelGrid(R, grid, u, counts)


def trilinear_weights(norm_coords: np.ndarray, R: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat voxel indices and weights of the 8 cells around each point.

    Returns ``(index, weight)``, each ``(B, N, 8)``.
    """
    lo = np.minimum(np.floor(norm_coords).astype(np.int64), R - 1)
    t = norm_coords - lo
    hi = np.minimum(lo + 1, R - 1)
    index = []
    weight = []
    for cx in (0, 1):
        ix = hi[..., 0] if cx else lo[..., 0]
        wx = t[..., 0] if cx else 1.0 - t[..., 0]
        for cy in (0, 1):
            iy = hi[..., 1] if cy else lo[..., 1]
            wy = t[..., 1] if cy else 1.0 - t[..., 1]
            for cz in (0, 1):
                iz = hi[..., 2] if cz else lo[..., 2]
                wz = t[..., 2] if cz else 1.0 - t[..., 2]
                index.append((ix * R + iy) * R + iz)
                weight.append(wx * wy * wz)
    return np.stack(index, axis=-1), np.stack(weight, axis=-1)


def devoxelize_trilinear(grid: VoxelGrid, features=None) -> Tensor:
    """Trilinear blend of the 8 voxels around each point -> ``(B, N, C)``.

    ``features`` overrides ``grid.features`` (e.g. after 3D convolutions),
    reusing the grid's point-to-voxel mapping.
    """
    vox = grid.features if features is None else as_tensor(features)
    B = vox.shape[0]
    vox = vox.reshape(B, grid.resolution ** 3, vox.shape[-1])
    index, weight = trilinear_weights(grid.norm_coords, grid.resolution)
    return F.weighted_gather(vox, index, weight)


# -- nearest-neighbor upsampling ----------------------------------------------

def three_nn_weights(source_coords: np.ndarray, target_coords: np.ndarray, k: int = 3):
    """Indices and product-form weights of the ``k`` nearest sources per target.

    Works on single clouds (``(M,3)``, ``(N,3)``) or with leading batch axes.

    For distances ``d_1..d_k`` the weight of source ``i`` is the product of the
    other distances over the sum of all such products; with ``k=3`` this is
    ``(d2 d3, d1 d3, d1 d2) / S``. Several zero distances copy the lowest-index
    coincident source. Fewer than ``k`` sources use all of them.
    """
    src = np.asarray(source_coords, dtype=np.float64)
    tgt = np.asarray(target_coords, dtype=np.float64)
    k = min(k, src.shape[-2])
    d2 = ((tgt[..., :, None, :] - src[..., None, :, :]) ** 2).sum(-1)
    idx = np.argsort(d2, axis=-1, kind="stable")[..., :k]
    d = np.sqrt(np.take_along_axis(d2, idx, axis=-1))
    prods = np.empty_like(d)
    for i in range(k):
        others = [j for j in range(k) if j != i]
        prods[..., i] = np.prod(d[..., others], axis=-1) if others else 1.0
    S = prods.sum(axis=-1, keepdims=True)
    ok = S[..., 0] > 0
    w = np.divide(prods, S, out=np.zeros_like(d), where=S > 0)
    # two or more exact hits: copy the first (lowest-index) coincident source
    w[~ok, 0] = 1.0
    return idx, w


def interpolate_3nn(source_coords: np.ndarray, source_feats, target_coords: np.ndarray) -> Tensor:
    """Upsample ``source_feats`` to ``target_coords`` by 3-NN weighting.

    Accepts single clouds (``(M,3)``, ``(M,C)``, ``(N,3)``) or batches with a
    leading batch axis; the result matches the input's batching.
    """
    source_coords = np.asarray(source_coords)
    target_coords = np.asarray(target_coords)
    feats = as_tensor(source_feats)
    single = source_coords.ndim == 2
    if single:
        source_coords, target_coords = source_coords[None], target_coords[None]
        feats = feats.reshape(1, *feats.shape)
    idx, w = three_nn_weights(source_coords, target_coords)
    out = F.weighted_gather(feats, idx, w)
    if single:
        out = out.reshape(out.shape[1:])
    return out
