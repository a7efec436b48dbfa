"""Finite-difference gradient checks for every differentiable operation.

Each registered check builds a small float64 instance, reduces the output
with a fixed random projection ``L = sum(P * out)`` and compares the
backward pass against central differences for every input and parameter.

The per-element relative error is ``|a - n| / max(|a|, |n|, floor)`` with
``floor = 1e-5 * max(1, max |n|)`` taken over all leaves of the case:
entries whose true gradient is near zero (a bias feeding batch norm, say)
are compared against the case's gradient scale rather than their own
rounding noise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import geometry as G
from .attention import InnerSelfAttention, MiddleAggregation, OuterCrossAttention
from .nn import functional as F
from .nn.modules import BatchNorm, Conv3d, Linear
from .nn.tensor import Tensor, finite_checks
from .vtp import VtpBlock, VtpConfig

TOLERANCE = 1e-4
STEP = 1e-5
FLOOR = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    n_entries: int
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < TOLERANCE)


# A case returns (leaves, forward): ``leaves`` are tensors whose ``data`` the
# checker perturbs in place; ``forward()`` recomputes the output from them.
Case = Callable[[np.random.Generator], tuple[list[tuple[str, Tensor]], Callable[[], Tensor]]]
REGISTRY: dict[str, Case] = {}


def register(name: str):
    def deco(fn: Case) -> Case:
        REGISTRY[name] = fn
        return fn

    return deco


def _leaf(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _params(module) -> list[tuple[str, Tensor]]:
    module.astype(np.float64)
    return list(module.named_parameters())


def _away_from_zero(rng, shape, gap=0.1):
    """Random values with ``|x| >= gap`` so no ReLU kink sits within a step."""
    x = rng.normal(size=shape)
    return np.where(x >= 0, x + gap, x - gap)


def _distinct(rng, shape):
    """Values at least ~0.06 apart from each other, so max pooling has no ties."""
    x = rng.permutation(np.prod(shape)).reshape(shape).astype(np.float64)
    return x * 0.1 + rng.uniform(-0.02, 0.02, size=shape)


@register("linear")
def _linear(rng):
    x, lin = _leaf(rng.normal(size=(3, 4))), Linear(4, 2, rng)
    lin.bias.data = rng.normal(size=2)
    return [("x", x)] + _params(lin), lambda: lin(x)


@register("batch_norm")
def _batch_norm(rng):
    x, bn = _leaf(rng.normal(size=(8, 4)) * 2 + 1), BatchNorm(4)
    params = _params(bn)
    bn.gamma.data = rng.uniform(0.5, 1.5, size=4)
    bn.beta.data = rng.normal(size=4)
    return [("x", x)] + params, lambda: bn(x)


@register("batch_norm_eval")
def _batch_norm_eval(rng):
    x, bn = _leaf(rng.normal(size=(8, 4))), BatchNorm(4)
    params = _params(bn)
    bn.running_mean[...] = rng.normal(size=4)
    bn.running_var[...] = rng.uniform(0.5, 2.0, size=4)
    bn.eval()
    return [("x", x)] + params, lambda: bn(x)


@register("activation")
def _activation(rng):
    x = _leaf(_away_from_zero(rng, (4, 5)))
    return [("x", x)], lambda: F.activation(x)


@register("softmax")
def _softmax(rng):
    x = _leaf(rng.normal(size=(4, 6)))
    return [("x", x)], lambda: F.softmax_rows(x)


@register("pool_max")
def _pool_max(rng):
    x = _leaf(_distinct(rng, (3, 5, 4)))
    return [("x", x)], lambda: F.pool_max(x, axis=-2)


@register("pool_mean")
def _pool_mean(rng):
    x = _leaf(rng.normal(size=(3, 5, 4)))
    return [("x", x)], lambda: F.pool_mean(x, axis=-2)


@register("dropout")
def _dropout(rng):
    x = _leaf(rng.normal(size=(6, 5)))
    return [("x", x)], lambda: F.dropout(x, 0.5, True, np.random.default_rng(7))


@register("cross_entropy")
def _cross_entropy(rng):
    x = _leaf(rng.normal(size=(5, 4)))
    labels = rng.integers(0, 4, size=5)
    return [("logits", x)], lambda: F.cross_entropy(x, labels)


@register("inner_self_attention")
def _inner(rng):
    x = _leaf(rng.normal(size=(2, 3, 5, 6)))
    att = InnerSelfAttention(6, 8, rng)
    return [("x", x)] + _params(att), lambda: att(x)


@register("middle_aggregation")
def _middle(rng):
    x = _leaf(_distinct(rng, (2, 3, 5, 8)))
    agg = MiddleAggregation(8, rng)
    return [("x", x)] + _params(agg), lambda: agg(x)


@register("outer_cross_attention")
def _outer(rng):
    fk, fnew = _leaf(rng.normal(size=(2, 5, 4))), _leaf(rng.normal(size=(2, 5, 16)))
    cross = OuterCrossAttention(4, 16, rng, heads=8)
    params = _params(cross)

    def forward():
        # train mode with a fixed mask exercises the dropout path too
        return cross(fk, fnew, np.random.default_rng(3))

    return [("F_k", fk), ("F_k_new", fnew)] + params, forward


@register("voxelize")
def _voxelize(rng):
    coords = rng.uniform(-1, 1, size=(2, 20, 3))
    feats = _leaf(rng.normal(size=(2, 20, 3)))
    return [("features", feats)], lambda: G.voxelize(coords, feats, 4).features


@register("trilinear_devoxelize")
def _devox(rng):
    coords = rng.uniform(-1, 1, size=(2, 20, 3))
    grid = G.voxelize(coords, np.zeros((2, 20, 1)), 4)
    vox = _leaf(rng.normal(size=(2, 64, 3)))
    return [("voxels", vox)], lambda: G.devoxelize_trilinear(grid, vox)


@register("conv3d")
def _conv3d(rng):
    x = _leaf(rng.normal(size=(2, 4, 4, 4, 3)))
    conv = Conv3d(3, 4, rng)
    params = _params(conv)
    conv.bias.data = rng.normal(size=4)
    return [("x", x)] + params, lambda: conv(x)


@register("interpolate_3nn")
def _three_nn(rng):
    src = rng.uniform(-1, 1, size=(2, 6, 3))
    tgt = rng.uniform(-1, 1, size=(2, 15, 3))
    feats = _leaf(rng.normal(size=(2, 6, 4)))
    return [("source_feats", feats)], lambda: G.interpolate_3nn(src, feats, tgt)


@register("vtp_forward")
def _vtp(rng):
    cfg = VtpConfig.of(8, 4, 6, 0.5, 4)
    coords = rng.uniform(-1, 1, size=(2, 16, 3))
    feats = _leaf(rng.normal(size=(2, 16, 4)))
    block = VtpBlock(4, cfg, rng)
    params = _params(block)

    def forward():
        return block(coords, feats, rng=np.random.default_rng(5), fps_seed="first")

    return [("F_in", feats)] + params, forward


def rel_error(analytic: np.ndarray, numeric: np.ndarray, scale: float | None = None) -> float:
    if scale is None:
        scale = float(np.max(np.abs(numeric), initial=0.0))
    floor = FLOOR * max(1.0, scale)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom, initial=0.0))


def check(name: str, seed: int = 0) -> CheckResult:
    if name not in REGISTRY:
        raise KeyError(f"unknown gradient check {name!r}; known: {', '.join(sorted(REGISTRY))}")
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    with finite_checks(True):
        leaves, forward = REGISTRY[name](rng)
        out = forward()
        proj = np.random.default_rng(seed + 1).normal(size=out.shape)

        def loss() -> float:
            return float(np.sum(forward().data * proj))

        for _, t in leaves:
            t.grad = np.zeros_like(t.data)
        forward().backward(proj)
        pairs = []
        for _, t in leaves:
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            numeric = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + STEP
                up = loss()
                flat[i] = orig - STEP
                down = loss()
                flat[i] = orig
                numeric.reshape(-1)[i] = (up - down) / (2 * STEP)
            pairs.append((analytic, numeric))
    scale = max(float(np.max(np.abs(n), initial=0.0)) for _, n in pairs)
    worst = max(rel_error(a, n, scale) for a, n in pairs)
    count = sum(n.size for _, n in pairs)
    return CheckResult(name, worst, count, time.perf_counter() - start)


def run_checks(names=None, seed: int = 0) -> list[CheckResult]:
    return [check(n, seed) for n in (names or sorted(REGISTRY))]
