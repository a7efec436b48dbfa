"""Controlled ablations over the three VTP design axes.

Every variant is trained from the same model seed and data for each seed
in the list, so rows differ only in the ablated switch. Variants that
coincide with the base configuration are trained once and reused.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..attention import Aggregation, FeatureMode
from ..config import RunConfig
from ..io.atomic import atomic_write_text
from ..vtp import VtpConfig
from .loop import evaluate, train_loop

log = logging.getLogger(__name__)

AXES = ("scale_pairing", "feature_mode", "aggregation")
AGG_LETTERS = {Aggregation.MAX: "A", Aggregation.MEAN: "B",
               Aggregation.MAX_MINUS_MEAN: "C", Aggregation.MAX_CONCAT_MEAN: "D"}
# (sphere size of the large-voxel blocks, sphere size of the small-voxel blocks)
SCALE_ROWS = (("large", "large"), ("small", "small"), ("large", "small"), ("small", "large"))


@dataclass(frozen=True)
class Variant:
    axis: str
    name: str
    tag: str
    blocks: tuple[VtpConfig, ...]


@dataclass
class AblationRow:
    axis: str
    variant: str
    tag: str
    seed: int
    metric: float
    mean: float = float("nan")
    std: float = float("nan")
    rank: int = 0


def scale_pairing_variants(blocks, r_large: float, r_small: float) -> list[Variant]:
    """The four voxel-scale / sphere-scale combinations.

    Blocks with the lowest resolution are the large-voxel blocks, the rest
    are small-voxel blocks; each row assigns them a large or small radius.
    """
    r_low = min(b.R for b in blocks)
    r_high = max(b.R for b in blocks)
    radius = {"large": r_large, "small": r_small}
    out = []
    for i, (big_vox, small_vox) in enumerate(SCALE_ROWS, 1):
        new = tuple(b.with_(r=radius[big_vox] if b.R == r_low else radius[small_vox]) for b in blocks)
        tag = (f"large voxel R={r_low} r={radius[big_vox]} ({big_vox} sphere); "
               f"small voxel R={r_high} r={radius[small_vox]} ({small_vox} sphere)")
        out.append(Variant("scale_pairing", str(i), tag, new))
    return out


def feature_mode_variants(blocks) -> list[Variant]:
    return [Variant("feature_mode", m.value, f"inner attention input: {m.value}",
                    tuple(b.with_(feature_mode=m) for b in blocks)) for m in FeatureMode]


def aggregation_variants(blocks) -> list[Variant]:
    return [Variant("aggregation", AGG_LETTERS[a], a.value, tuple(b.with_(agg=a) for b in blocks))
            for a in Aggregation]


def variants_for(axis: str, cfg: RunConfig, r_large: float, r_small: float) -> list[Variant]:
    if axis == "scale_pairing":
        return scale_pairing_variants(cfg.blocks, r_large, r_small)
    if axis == "feature_mode":
        return feature_mode_variants(cfg.blocks)
    if axis == "aggregation":
        return aggregation_variants(cfg.blocks)
    raise ValueError(f"unknown ablation axis {axis!r} (choose from {AXES})")


def _rank(rows: list[AblationRow]) -> None:
    by_variant: dict[str, list[AblationRow]] = {}
    for r in rows:
        by_variant.setdefault(r.variant, []).append(r)
    stats = {v: (float(np.mean([r.metric for r in rs])), float(np.std([r.metric for r in rs])))
             for v, rs in by_variant.items()}
    order = sorted(stats, key=lambda v: -stats[v][0])
    for r in rows:
        r.mean, r.std = stats[r.variant]
        r.rank = order.index(r.variant) + 1


def table_csv(rows: list[AblationRow], metric_name: str) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["variant", "tag", "seed", metric_name, "mean", "std", "rank"])
    for r in sorted(rows, key=lambda r: (r.rank, r.seed)):
        w.writerow([r.variant, r.tag, r.seed, f"{r.metric:.6f}", f"{r.mean:.6f}", f"{r.std:.6f}", r.rank])
    return out.getvalue()


def run_ablation(cfg: RunConfig, axes=AXES, seeds=(0, 1, 2), r_large: float | None = None,
                 r_small: float | None = None, out_dir=None) -> dict[str, list[AblationRow]]:
    """Train and evaluate every variant of ``axes`` for each seed.

    ``cfg`` supplies the base blocks, data and training budget; the model and
    training seeds are both set to the row's seed. Radii default to the
    largest and smallest radius found in the base blocks. With ``out_dir``
    one ``<axis>.csv`` is written per axis.
    """
    cfg = cfg.resolved()
    radii = sorted({b.r for b in cfg.blocks})
    r_large = radii[-1] if r_large is None else r_large
    r_small = radii[0] if r_small is None else r_small
    if r_large == r_small:
        raise ValueError("scale pairing needs two distinct radii")
    metric_name = "mIoU" if cfg.task == "seg" else "OA"
    train_set, eval_set = cfg.dataset("train"), cfg.dataset("eval")
    cache: dict = {}
    results: dict[str, list[AblationRow]] = {}
    for axis in axes:
        rows = []
        for var in variants_for(axis, cfg, r_large, r_small):
            for seed in seeds:
                key = (var.blocks, seed)
                if key not in cache:
                    run = dataclasses.replace(cfg, blocks=var.blocks, model_seed=seed,
                                              train=dataclasses.replace(cfg.train, seed=seed))
                    model = run.model()
                    t0 = time.perf_counter()
                    res = train_loop(model, train_set, run.train.epochs, run.train.batch_size,
                                     run.optimizer(model.parameters()), seed, run.schedule(), eval_set)
                    report = res.history[-1] if res.history else evaluate(model, eval_set)
                    cache[key] = getattr(report, metric_name)
                    log.info("%s %s seed=%d (model seed %d, train seed %d): %s=%.4f in %.1fs",
                             axis, var.name, seed, seed, seed, metric_name, cache[key],
                             time.perf_counter() - t0)
                rows.append(AblationRow(axis, var.name, var.tag, seed, cache[key]))
        _rank(rows)
        results[axis] = rows
        if out_dir is not None:
            atomic_write_text(Path(out_dir) / f"{axis}.csv", table_csv(rows, metric_name))
    return results
