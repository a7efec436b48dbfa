"""Batched training and evaluation for the classification and segmentation nets."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..io.checkpoint import save_checkpoint
from ..network import ClsNet, SegNet
from ..nn import functional as F
from ..nn.tensor import no_grad
from .data import Dataset
from .metrics import MetricReport, classification_report, compute_miou
from .optim import Optimizer, Schedule

log = logging.getLogger(__name__)


def _collate(clouds):
    n = {len(c) for c in clouds}
    if len(n) != 1:
        raise ValueError(f"all clouds in a batch must share N, got {sorted(n)}")
    coords = np.stack([c.coords for c in clouds])
    normals = np.stack([c.normals for c in clouds])
    return coords, normals


def _check_task(model, data: Dataset) -> None:
    if isinstance(model, SegNet):
        if data.task != "part_segmentation":
            raise ValueError(f"segmentation model given a {data.task} dataset")
        if data.num_parts != model.cfg.num_parts or data.num_classes != model.cfg.num_categories:
            raise ValueError(
                f"dataset has {data.num_parts} parts / {data.num_classes} categories, model expects "
                f"{model.cfg.num_parts} / {model.cfg.num_categories}")
    elif isinstance(model, ClsNet):
        if data.task != "classification":
            raise ValueError(f"classification model given a {data.task} dataset")
        if data.num_classes != model.cfg.num_classes:
            raise ValueError(f"dataset has {data.num_classes} classes, model expects {model.cfg.num_classes}")
    else:
        raise TypeError(f"unsupported model {type(model).__name__}")
    if any(c.normals is None for c in data.clouds):
        raise ValueError("every cloud needs normals")


def forward_batch(model, clouds, rng=None):
    """Logits and integer targets for one batch."""
    coords, normals = _collate(clouds)
    if isinstance(model, SegNet):
        onehot = np.zeros((len(clouds), model.cfg.num_categories))
        onehot[np.arange(len(clouds)), [c.category for c in clouds]] = 1.0
        logits = model(coords, normals, onehot, rng=rng)
        targets = np.stack([c.labels for c in clouds])
    else:
        logits = model(coords, normals, rng=rng)
        targets = np.array([c.category for c in clouds])
    return logits, targets


def _batches(order: np.ndarray, batch_size: int, min_size: int) -> list[np.ndarray]:
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < min_size:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def evaluate(model, data: Dataset, batch_size: int = 16) -> MetricReport:
    """Eval-mode metrics; parameters and running statistics are not touched."""
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    _check_task(model, data)
    was_training = model.training
    model.eval()
    preds, losses, weights = [], [], []
    try:
        with no_grad():
            for idx in _batches(np.arange(len(data)), batch_size, 1):
                clouds = [data.clouds[i] for i in idx]
                logits, targets = forward_batch(model, clouds)
                losses.append(F.cross_entropy(logits, targets).item())
                weights.append(len(idx))
                preds.extend(np.argmax(logits.data, axis=-1))
    finally:
        model.train(was_training)
    loss = float(np.average(losses, weights=weights))
    if isinstance(model, SegNet):
        report = compute_miou(preds, [c.labels for c in data.clouds],
                              [c.category for c in data.clouds], data.parts_of_category)
    else:
        report = classification_report(np.array(preds), np.array([c.category for c in data.clouds]))
    report.loss = loss
    return report


@dataclass
class TrainResult:
    history: list[MetricReport] = field(default_factory=list)
    train_losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def train_loop(
    model,
    train_set: Dataset,
    epochs: int,
    batch_size: int,
    opt: Optimizer,
    seed: int,
    schedule: Schedule | None = None,
    eval_set: Dataset | None = None,
    on_epoch_end: Callable[[int, MetricReport], None] | None = None,
    stop_when: Callable[[MetricReport], bool] | None = None,
    checkpoint_path=None,
    config_text: str = "",
) -> TrainResult:
    """Seeded mini-batch training.

    Each epoch shuffles with the run RNG, steps the optimizer once per batch,
    then evaluates (eval mode) on ``eval_set`` or, if absent, on the training
    set. The reported ``loss`` is the mean training loss of the epoch.

    With ``checkpoint_path`` the initial state and then every finished epoch
    are written there (atomically, so an interrupt keeps the last epoch).
    """
    _check_task(model, train_set)
    if eval_set is not None:
        _check_task(model, eval_set)
    schedule = schedule or Schedule()
    rng = np.random.default_rng(seed)
    result = TrainResult()
    start = time.perf_counter()
    metric_set = eval_set if eval_set is not None else train_set

    def checkpoint(epoch: int) -> None:
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, opt, config_text, {"epoch": epoch, "seed": seed})

    checkpoint(0)
    for epoch in range(epochs):
        model.train()
        opt.set_epoch(schedule, epoch)
        order = rng.permutation(len(train_set))
        losses, sizes = [], []
        for idx in _batches(order, batch_size, 2):
            clouds = [train_set.clouds[i] for i in idx]
            opt.zero_grad()
            logits, targets = forward_batch(model, clouds, rng=rng)
            loss = F.cross_entropy(logits, targets)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            sizes.append(len(idx))
        train_loss = float(np.average(losses, weights=sizes))
        report = evaluate(model, metric_set, batch_size)
        report.loss = train_loss
        report.epoch = epoch + 1
        result.history.append(report)
        result.train_losses.append(train_loss)
        log.info("epoch %d loss %.4f OA %.4f mAcc %.4f mIoU %.4f lr %.2e",
                 epoch + 1, train_loss, report.OA, report.mAcc, report.mIoU, opt.lr)
        checkpoint(epoch + 1)
        if on_epoch_end is not None:
            on_epoch_end(epoch + 1, report)
        if stop_when is not None and stop_when(report):
            break
    model.eval()
    result.seconds = time.perf_counter() - start
    return result
