"""Reading LiDAR frames, poses and point labels; pose alignment and ground removal.

File layouts follow KITTI:

* point frame: packed little-endian float32 records ``(x, y, z, intensity)``
* pose file: one line per frame, 12 decimals forming a row-major 3x4 ``[R|t]``
* label file: one little-endian uint32 per point
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from motsmos.errors import DataError, FormatError

log = logging.getLogger(__name__)

RECORD_BYTES = 16

# SemanticKITTI-MOS moving classes.
DEFAULT_MOVING_LABELS = frozenset(range(251, 260))


@dataclass
class PointFrame:
    """One LiDAR sweep.

    ``points`` is an (N, 3) float array in meters, ``intensities`` an (N,)
    array. ``dropped`` counts non-finite records removed at load time.
    """

    points: np.ndarray
    intensities: np.ndarray
    frame_index: int = 0
    dropped: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.intensities = np.asarray(self.intensities, dtype=np.float64).reshape(-1)
        if len(self.points) != len(self.intensities):
            raise DataError(
                f"points ({len(self.points)}) and intensities ({len(self.intensities)}) differ in length"
            )
        if self.frame_index < 0:
            raise DataError(f"frame_index must be non-negative, got {self.frame_index}")

    def __len__(self):
        return len(self.points)


@dataclass
class Pose:
    rotation: np.ndarray
    translation: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-5 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-5:
            raise DataError(f"pose {self.frame_index}: rotation is not orthonormal (error {err:.2e})")

    @classmethod
    def identity(cls, frame_index: int = 0) -> "Pose":
        return cls(np.eye(3), np.zeros(3), frame_index)

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 form."""
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out


@dataclass
class PointLabels:
    """Per-point moving flags (True = moving) for one frame."""

    moving: np.ndarray
    frame_index: int = 0
    raw: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.moving = np.asarray(self.moving, dtype=bool).reshape(-1)

    def __len__(self):
        return len(self.moving)


def load_point_frame(path: str | os.PathLike, frame_index: int = 0) -> PointFrame:
    """Decode a KITTI ``.bin`` sweep, dropping records with NaN/Inf fields.

    Point order in the file is preserved.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read point frame {path}: {exc}") from exc
    trailing = len(blob) % RECORD_BYTES
    if trailing:
        raise FormatError(
            f"{path}: size {len(blob)} is not a multiple of {RECORD_BYTES} ({trailing} trailing bytes)"
        )
    records = np.frombuffer(blob, dtype="<f4").reshape(-1, 4)
    finite = np.isfinite(records).all(axis=1)
    dropped = int((~finite).sum())
    if dropped:
        log.debug("%s: dropped %d non-finite points", path, dropped)
    records = records[finite]
    return PointFrame(records[:, :3], records[:, 3], frame_index, dropped)


def load_point_frame_with_mask(path, frame_index=0):
    """Like :func:`load_point_frame` but also returns the keep-mask over file records.

    Needed to filter a label file jointly with the points.
    """
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) % RECORD_BYTES:
        raise FormatError(
            f"{path}: size {len(blob)} is not a multiple of {RECORD_BYTES} "
            f"({len(blob) % RECORD_BYTES} trailing bytes)"
        )
    records = np.frombuffer(blob, dtype="<f4").reshape(-1, 4)
    finite = np.isfinite(records).all(axis=1)
    kept = records[finite]
    return PointFrame(kept[:, :3], kept[:, 3], frame_index, int((~finite).sum())), finite


def save_point_frame(path: str | os.PathLike, frame: PointFrame) -> None:
    rec = np.empty((len(frame), 4), dtype="<f4")
    rec[:, :3] = frame.points
    rec[:, 3] = frame.intensities
    Path(path).write_bytes(rec.tobytes())


def load_labels(
    path: str | os.PathLike,
    moving_labels=DEFAULT_MOVING_LABELS,
    frame_index: int = 0,
) -> PointLabels:
    """Read a uint32 label file.

    Only the lower 16 bits (the semantic class; SemanticKITTI keeps the
    instance id in the upper half) are matched against ``moving_labels``.
    """
    blob = Path(path).read_bytes()
    if len(blob) % 4:
        raise FormatError(f"{path}: size {len(blob)} is not a multiple of 4 ({len(blob) % 4} trailing bytes)")
    raw = np.frombuffer(blob, dtype="<u4")
    semantic = raw & 0xFFFF
    moving = np.isin(semantic, np.fromiter(moving_labels, dtype=np.uint32, count=len(moving_labels)))
    return PointLabels(moving, frame_index, raw)


def save_labels(path: str | os.PathLike, labels, moving_value: int = 1, static_value: int = 0) -> None:
    """Write per-point flags as uint32 values (``moving_value`` / ``static_value``)."""
    moving = labels.moving if isinstance(labels, PointLabels) else np.asarray(labels, dtype=bool)
    out = np.where(moving, moving_value, static_value).astype("<u4")
    Path(path).write_bytes(out.tobytes())


def load_poses(path: str | os.PathLike) -> list[Pose]:
    poses = []
    with open(path) as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                vals = np.array([float(v) for v in line.split()])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno + 1}: {exc}") from exc
            if vals.size != 12:
                raise FormatError(f"{path}:{lineno + 1}: expected 12 values, got {vals.size}")
            mat = vals.reshape(3, 4)
            poses.append(Pose(mat[:, :3], mat[:, 3], len(poses)))
    return poses


def apply_pose(frame: PointFrame, pose: Pose, reference: Pose) -> PointFrame:
    """Express ``frame`` (recorded at ``pose``) in the coordinate system of ``reference``.

    Computes ``R_ref^T (R_pose p + t_pose - t_ref)`` for every point.
    """
    world = frame.points @ pose.rotation.T + pose.translation
    local = (world - reference.translation) @ reference.rotation
    return PointFrame(local, frame.intensities.copy(), frame.frame_index, frame.dropped)


def remove_ground(frame: PointFrame, z_threshold: float = -1.0) -> tuple[PointFrame, np.ndarray]:
    """Keep points strictly above ``z_threshold``.

    Returns the filtered frame and the indices of the kept points in the input.
    """
    keep = np.flatnonzero(frame.points[:, 2] > z_threshold)
    out = PointFrame(frame.points[keep], frame.intensities[keep], frame.frame_index, frame.dropped)
    return out, keep
