"""File formats: point clouds, prediction export and checkpoints."""

from .checkpoint import Checkpoint, CheckpointFormatError, load_checkpoint, restore, save_checkpoint
from .export import PALETTE, Prediction, export_prediction
from .pointcloud import PointCloudFormatError, load_pointcloud, read_ply, read_xyzn, write_ply, write_xyzn

__all__ = [
    "Checkpoint", "CheckpointFormatError", "PALETTE", "PointCloudFormatError", "Prediction",
    "export_prediction", "load_checkpoint", "load_pointcloud", "read_ply", "read_xyzn",
    "restore", "save_checkpoint", "write_ply", "write_xyzn",
]
