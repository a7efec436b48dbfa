from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MetricReport:
    mIoU: float = float("nan")
    per_class_iou: dict = field(default_factory=dict)
    OA: float = float("nan")
    mAcc: float = float("nan")
    loss: float = float("nan")
    epoch: int | None = None

    def row(self) -> dict:
        return {"epoch": self.epoch, "loss": self.loss, "OA": self.OA, "mAcc": self.mAcc, "mIoU": self.mIoU}


def shape_iou(pred: np.ndarray, true: np.ndarray, parts) -> float:
    """Mean IoU over ``parts`` for one shape; a part absent from both counts 1."""
    ious = []
    for p in parts:
        inter = np.sum((pred == p) & (true == p))
        union = np.sum((pred == p) | (true == p))
        ious.append(1.0 if union == 0 else inter / union)
    return float(np.mean(ious))


def accuracy_stats(pred: np.ndarray, true: np.ndarray) -> tuple[float, float]:
    """Overall accuracy and class-averaged accuracy over the classes present in ``true``."""
    pred = np.asarray(pred).ravel()
    true = np.asarray(true).ravel()
    if true.size == 0:
        raise ValueError("accuracy of an empty set")
    oa = float(np.mean(pred == true))
    per_class = [np.mean(pred[true == c] == c) for c in np.unique(true)]
    return oa, float(np.mean(per_class))


def compute_miou(preds, trues, categories, parts_of_category: dict) -> MetricReport:
    """Instance-averaged part IoU.

    Each shape's IoU is the mean over its category's parts; ``mIoU`` averages
    those over all shapes and ``per_class_iou`` averages them per category.
    Point-level OA/mAcc are reported alongside.
    """
    preds = [np.asarray(p) for p in preds]
    trues = [np.asarray(t) for t in trues]
    if not preds:
        raise ValueError("compute_miou needs at least one shape")
    if len(preds) != len(trues) or len(preds) != len(categories):
        raise ValueError("preds, trues and categories must have equal length")
    by_cat: dict = {}
    ious = []
    for p, t, c in zip(preds, trues, categories):
        iou = shape_iou(p, t, parts_of_category[c])
        ious.append(iou)
        by_cat.setdefault(c, []).append(iou)
    oa, macc = accuracy_stats(np.concatenate(preds), np.concatenate(trues))
    return MetricReport(
        mIoU=float(np.mean(ious)),
        per_class_iou={c: float(np.mean(v)) for c, v in sorted(by_cat.items())},
        OA=oa,
        mAcc=macc,
    )


def classification_report(pred: np.ndarray, true: np.ndarray) -> MetricReport:
    oa, macc = accuracy_stats(pred, true)
    return MetricReport(OA=oa, mAcc=macc)
