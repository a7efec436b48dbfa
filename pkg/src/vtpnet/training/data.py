"""Synthetic primitive-shape datasets standing in for ModelNet / ShapeNet-Part.

Points are drawn uniformly (by area) on each primitive's surface with analytic
normals. Part labels come from geometric regions, numbered globally across
categories the way ShapeNet-Part numbers its 50 parts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import PointCloud

SHAPES = ("sphere", "cube", "cylinder", "torus")
PART_NAMES = {
    "sphere": ("north", "south"),
    "cube": ("top_bottom", "side"),
    "cylinder": ("body", "cap"),
    "torus": ("outer", "inner"),
}
CYLINDER_RADIUS = 0.6
CYLINDER_HALF_HEIGHT = 0.6
CUBE_HALF = 0.55
TORUS_MAJOR = 0.7
TORUS_MINOR = 0.25


@dataclass
class SyntheticDatasetSpec:
    task: str = "classification"  # or "part_segmentation"
    shapes: tuple[str, ...] = SHAPES
    points_per_cloud: int = 256
    num_clouds: int = 200
    noise_sigma: float = 0.0
    seed: int = 0
    rotate: bool = False

    def __post_init__(self):
        if self.task not in ("classification", "part_segmentation"):
            raise ValueError(f"unknown task {self.task!r}")
        self.shapes = tuple(self.shapes)
        unknown = set(self.shapes) - set(SHAPES)
        if unknown:
            raise ValueError(f"unknown shapes {sorted(unknown)}")


@dataclass
class Dataset:
    task: str
    clouds: list[PointCloud]
    shapes: tuple[str, ...]
    parts_of_category: dict[int, list[int]] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.shapes)

    @property
    def num_parts(self) -> int:
        return sum(len(v) for v in self.parts_of_category.values())

    def __len__(self) -> int:
        return len(self.clouds)


def parts_layout(shapes) -> dict[int, list[int]]:
    layout, nxt = {}, 0
    for i, s in enumerate(shapes):
        n = len(PART_NAMES[s])
        layout[i] = list(range(nxt, nxt + n))
        nxt += n
    return layout


def _sphere(rng, n):
    p = rng.normal(size=(n, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    part = (p[:, 2] < 0).astype(np.int64)
    return p, p.copy(), part


def _cube(rng, n):
    face = rng.integers(0, 6, size=n)
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    p = rng.uniform(-CUBE_HALF, CUBE_HALF, size=(n, 3))
    p[np.arange(n), axis] = sign * CUBE_HALF
    nrm = np.zeros((n, 3))
    nrm[np.arange(n), axis] = sign
    part = (axis != 2).astype(np.int64)
    return p, nrm, part


def _cylinder(rng, n):
    rho, h = CYLINDER_RADIUS, CYLINDER_HALF_HEIGHT
    body_area = 2 * np.pi * rho * 2 * h
    cap_area = 2 * np.pi * rho ** 2
    on_cap = rng.random(n) < cap_area / (body_area + cap_area)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    p = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    # body
    p[:, 0] = rho * np.cos(theta)
    p[:, 1] = rho * np.sin(theta)
    p[:, 2] = rng.uniform(-h, h, size=n)
    nrm[:, 0] = np.cos(theta)
    nrm[:, 1] = np.sin(theta)
    # caps: uniform on a disk
    rad = rho * np.sqrt(rng.random(n))
    top = rng.random(n) < 0.5
    zc = np.where(top, h, -h)
    p[on_cap, 0] = rad[on_cap] * np.cos(theta[on_cap])
    p[on_cap, 1] = rad[on_cap] * np.sin(theta[on_cap])
    p[on_cap, 2] = zc[on_cap]
    nrm[on_cap] = 0.0
    nrm[on_cap, 2] = np.sign(zc[on_cap])
    return p, nrm, on_cap.astype(np.int64)


def _torus(rng, n):
    R, r = TORUS_MAJOR, TORUS_MINOR
    u = np.empty(0)
    v = np.empty(0)
    # rejection sampling on the area element (R + r cos v)
    while len(u) < n:
        cu = rng.uniform(0, 2 * np.pi, size=2 * n)
        cv = rng.uniform(0, 2 * np.pi, size=2 * n)
        keep = rng.uniform(0, R + r, size=2 * n) < R + r * np.cos(cv)
        u = np.concatenate([u, cu[keep]])
        v = np.concatenate([v, cv[keep]])
    u, v = u[:n], v[:n]
    nrm = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
    p = np.stack([(R + r * np.cos(v)) * np.cos(u), (R + r * np.cos(v)) * np.sin(u), r * np.sin(v)], axis=1)
    part = (np.cos(v) < 0).astype(np.int64)
    return p, nrm, part


_GENERATORS = {"sphere": _sphere, "cube": _cube, "cylinder": _cylinder, "torus": _torus}


def _random_rotation_z(rng) -> np.ndarray:
    a = rng.uniform(0, 2 * np.pi)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def sample_shape(name: str, n: int, rng: np.random.Generator):
    """``(coords, normals, local_part)`` for ``n`` points on one primitive."""
    return _GENERATORS[name](rng, n)


def generate_synthetic(spec: SyntheticDatasetSpec) -> Dataset:
    """Deterministic dataset for ``spec``; shapes are assigned round-robin."""
    rng = np.random.default_rng(spec.seed)
    layout = parts_layout(spec.shapes)
    clouds = []
    for i in range(spec.num_clouds):
        cat = i % len(spec.shapes)
        p, nrm, local = sample_shape(spec.shapes[cat], spec.points_per_cloud, rng)
        if spec.rotate:
            rot = _random_rotation_z(rng)
            p, nrm = p @ rot.T, nrm @ rot.T
        if spec.noise_sigma > 0:
            p = p + rng.normal(scale=spec.noise_sigma, size=p.shape)
        labels = np.asarray(layout[cat])[local] if spec.task == "part_segmentation" else None
        clouds.append(PointCloud(p, normals=nrm, labels=labels, category=cat))
    return Dataset(spec.task, clouds, spec.shapes, layout)
