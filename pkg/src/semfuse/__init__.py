"""Late fusion of LiDAR and camera semantics into a log-space Bayesian voxel map."""

from .cloud_fusion import DetectionBox, LidarScan, SemanticCloud, augment_scan
from .core import DEFAULT_REGISTRY, ClassRegistry, FusionConfig
from .geometry import Calibration, CameraModel, RigExtrinsics, RigidTransform, Trajectory, chain_transform
from .image_fusion import DepthImage, FusedMask, ImageFusionStream, ScoreMask, fuse_image_frame
from .voxel_map import MapExport, VoxelMap, log_bayes_update

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_REGISTRY",
    "Calibration",
    "CameraModel",
    "ClassRegistry",
    "DepthImage",
    "DetectionBox",
    "FusedMask",
    "FusionConfig",
    "ImageFusionStream",
    "LidarScan",
    "MapExport",
    "RigExtrinsics",
    "RigidTransform",
    "ScoreMask",
    "SemanticCloud",
    "Trajectory",
    "VoxelMap",
    "augment_scan",
    "chain_transform",
    "fuse_image_frame",
    "log_bayes_update",
]
