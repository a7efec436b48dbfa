"""VTPNet: voxel + point-transformer + point blocks for point cloud learning."""

from .geometry import PointCloud
from .network import ClsNet, ClsNetConfig, SegNet, SegNetConfig
from .vtp import VtpBlock, VtpConfig

__version__ = "0.1.0"

__all__ = ["ClsNet", "ClsNetConfig", "PointCloud", "SegNet", "SegNetConfig", "VtpBlock", "VtpConfig"]
