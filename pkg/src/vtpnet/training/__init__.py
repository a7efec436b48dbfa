"""Loss, optimizers, metrics, synthetic data and the train/eval loops."""

from .data import Dataset, SyntheticDatasetSpec, generate_synthetic
from .loop import TrainResult, evaluate, train_loop
from .metrics import MetricReport, classification_report, compute_miou, shape_iou
from .optim import SGD, Adam, Schedule, make_optimizer

__all__ = [
    "Adam", "Dataset", "MetricReport", "SGD", "Schedule", "SyntheticDatasetSpec", "TrainResult",
    "classification_report", "compute_miou", "evaluate", "generate_synthetic", "make_optimizer",
    "shape_iou", "train_loop",
]
