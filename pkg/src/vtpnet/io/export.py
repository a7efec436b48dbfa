"""Colored PLY export of segmentation predictions."""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from ..geometry import PointCloud
from .pointcloud import write_ply

PALETTE_SIZE = 64


def _build_palette(n: int) -> np.ndarray:
    # golden-ratio hue walk with three brightness bands; fixed forever
    colors = []
    for i in range(n):
        hue = (i * 0.618033988749895) % 1.0
        sat = (0.85, 0.6, 0.95)[i % 3]
        val = (0.95, 0.75, 0.55)[(i // 3) % 3]
        colors.append(colorsys.hsv_to_rgb(hue, sat, val))
    return np.round(np.array(colors) * 255.0).astype(np.uint8)


PALETTE = _build_palette(PALETTE_SIZE)


def part_color(part: int) -> np.ndarray:
    """8-bit RGB of a part id; ids beyond the palette wrap around."""
    return PALETTE[int(part) % PALETTE_SIZE]


@dataclass
class Prediction:
    labels: np.ndarray  # (N,) part ids
    scores: np.ndarray | None = None  # optional (N, P) logits


def export_prediction(cloud: PointCloud, pred: Prediction, path) -> None:
    """Binary PLY of ``cloud`` with one palette color and the label per point."""
    labels = np.asarray(pred.labels, dtype=np.int64)
    if labels.shape != (len(cloud),):
        raise ValueError(f"prediction has shape {labels.shape}, cloud has {len(cloud)} points")
    rgb = PALETTE[labels % PALETTE_SIZE].astype(np.float64) / 255.0
    out = PointCloud(cloud.coords, normals=cloud.normals, colors=rgb, labels=labels)
    write_ply(path, out, binary=True)
