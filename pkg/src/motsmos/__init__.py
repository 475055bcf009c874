"""Unsupervised moving-object segmentation for stationary LiDAR videos.

Voxels are turned into multivariate occupancy time series (the binary
occupancy history of a voxel and its cubic neighborhood), embedded with a
small 1D convolutional autoencoder and partitioned with a Gaussian mixture.
"""

from motsmos.ingest import PointFrame, Pose, apply_pose, load_point_frame, remove_ground
from motsmos.voxelgrid import GridConfig, SparseFrameState, voxelize
from motsmos.mots import MotsBatch, extract_frame, extract_sequence, neighbor_offsets

__all__ = [
    "PointFrame",
    "Pose",
    "apply_pose",
    "load_point_frame",
    "remove_ground",
    "GridConfig",
    "SparseFrameState",
    "voxelize",
    "MotsBatch",
    "extract_frame",
    "extract_sequence",
    "neighbor_offsets",
]

__version__ = "0.1.0"
