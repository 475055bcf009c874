"""Sparse voxel occupancy over a sliding window of frames.

Each stored voxel carries its occupancy history as an integer bitmask: bit 0
is the current frame, bit ``w-1`` the oldest. Keys are 3D indices packed into
one int64 so lookups are vectorized ``searchsorted`` calls over a sorted key
array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from motsmos.errors import ConfigError, DataError

# 21 bits per axis, biased so negative indices pack as non-negative ints.
AXIS_BITS = 21
AXIS_BIAS = 1 << (AXIS_BITS - 1)
AXIS_MASK = (1 << AXIS_BITS) - 1
MAX_WINDOW = 63


@dataclass(frozen=True)
class GridConfig:
    resolution: float = 0.2
    window: int = 15
    radius: int = 2

    def __post_init__(self):
        if not self.resolution > 0:
            raise ConfigError(f"resolution must be positive, got {self.resolution}")
        if not 2 <= self.window <= MAX_WINDOW:
            raise ConfigError(f"window must lie in [2, {MAX_WINDOW}], got {self.window}")
        if self.radius < 0:
            raise ConfigError(f"radius must be >= 0, got {self.radius}")

    @property
    def channels(self) -> int:
        return (2 * self.radius + 1) ** 3


def pack_coords(coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    biased = coords + AXIS_BIAS
    if biased.size and (biased.min() < 0 or biased.max() > AXIS_MASK):
        raise DataError(f"voxel index outside +/-{AXIS_BIAS}; use a coarser resolution")
    return (biased[:, 0] << (2 * AXIS_BITS)) | (biased[:, 1] << AXIS_BITS) | biased[:, 2]


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    out = np.empty((len(keys), 3), dtype=np.int64)
    out[:, 0] = (keys >> (2 * AXIS_BITS)) & AXIS_MASK
    out[:, 1] = (keys >> AXIS_BITS) & AXIS_MASK
    out[:, 2] = keys & AXIS_MASK
    return out - AXIS_BIAS


def voxel_indices(points: np.ndarray, resolution: float) -> np.ndarray:
    """Per-point voxel index, ``floor(coordinate / m)`` on each axis."""
    return np.floor(np.asarray(points, dtype=np.float64).reshape(-1, 3) / resolution).astype(np.int64)


@dataclass
class Voxelization:
    """Occupied voxels of one frame plus the point members of each voxel.

    ``coords`` are sorted by packed key; the points of voxel ``i`` are
    ``order[starts[i]:starts[i + 1]]``.
    """

    coords: np.ndarray
    keys: np.ndarray
    point_voxel: np.ndarray
    order: np.ndarray
    starts: np.ndarray

    def __len__(self):
        return len(self.keys)

    def members(self, i: int) -> np.ndarray:
        return self.order[self.starts[i] : self.starts[i + 1]]

    def index_lists(self) -> list[np.ndarray]:
        return np.split(self.order, self.starts[1:-1])


def voxelize(points, resolution: float) -> Voxelization:
    if not resolution > 0:
        raise ConfigError(f"resolution must be positive, got {resolution}")
    pts = getattr(points, "points", points)
    idx = voxel_indices(pts, resolution)
    keys = pack_coords(idx)
    uniq, inverse = np.unique(keys, return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    counts = np.bincount(inverse, minlength=len(uniq))
    starts = np.concatenate([[0], np.cumsum(counts)])
    return Voxelization(unpack_keys(uniq), uniq, inverse.reshape(-1), order, starts)


class SparseFrameState:
    """Occupancy histories of every voxel seen occupied in the last ``w`` frames.

    ``t`` is the index of the most recent frame (-1 before the first advance).
    """

    def __init__(self, window: int):
        if not 2 <= window <= MAX_WINDOW:
            raise ConfigError(f"window must lie in [2, {MAX_WINDOW}], got {window}")
        self.window = window
        self.t = -1
        self.keys = np.empty(0, dtype=np.int64)
        self.bits = np.empty(0, dtype=np.uint64)
        self.last_occupied = np.empty(0, dtype=np.int64)
        self.current_keys = np.empty(0, dtype=np.int64)
        self.voxelization: Voxelization | None = None
        self._mask = np.uint64((1 << window) - 1)

    def __len__(self):
        return len(self.keys)

    def advance(self, occupied) -> "SparseFrameState":
        """Shift every history by one frame and mark ``occupied`` voxels.

        ``occupied`` is a :class:`Voxelization`, an (n, 3) coordinate array or
        an array of packed keys. Histories that drop to all-zero are evicted.
        """
        if isinstance(occupied, Voxelization):
            self.voxelization = occupied
            new_keys = occupied.keys
        else:
            self.voxelization = None
            if isinstance(occupied, (set, frozenset)):
                occupied = sorted(occupied)
            arr = np.asarray(occupied, dtype=np.int64)
            new_keys = pack_coords(arr) if arr.ndim == 2 else arr.reshape(-1)
        new_keys = np.unique(new_keys)
        self.t += 1

        shifted = (self.bits << np.uint64(1)) & self._mask
        keys = np.union1d(self.keys, new_keys)
        bits = np.zeros(len(keys), dtype=np.uint64)
        last = np.full(len(keys), -1, dtype=np.int64)
        old_pos = np.searchsorted(keys, self.keys)
        bits[old_pos] = shifted
        last[old_pos] = self.last_occupied
        new_pos = np.searchsorted(keys, new_keys)
        bits[new_pos] |= np.uint64(1)
        last[new_pos] = self.t

        alive = bits != 0
        self.keys = keys[alive]
        self.bits = bits[alive]
        self.last_occupied = last[alive]
        self.current_keys = new_keys
        return self

    def lookup(self, keys: np.ndarray) -> np.ndarray:
        """History bitmasks for packed ``keys``; 0 for keys not stored."""
        keys = np.asarray(keys, dtype=np.int64)
        if len(self.keys) == 0:
            return np.zeros(keys.shape, dtype=np.uint64)
        pos = np.searchsorted(self.keys, keys)
        pos_c = np.minimum(pos, len(self.keys) - 1)
        hit = self.keys[pos_c] == keys
        return np.where(hit, self.bits[pos_c], np.uint64(0))

    def history_of(self, coord) -> np.ndarray:
        """``w`` bits, oldest first; entry ``w-1`` is occupancy at ``t``."""
        mask = int(self.lookup(pack_coords(np.asarray(coord).reshape(1, 3)))[0])
        return bits_to_array(np.array([mask], dtype=np.uint64), self.window)[0]

    def histories(self) -> dict[tuple[int, int, int], np.ndarray]:
        coords = unpack_keys(self.keys)
        arr = bits_to_array(self.bits, self.window)
        return {tuple(int(c) for c in xyz): row for xyz, row in zip(coords, arr)}

    @property
    def current_coords(self) -> np.ndarray:
        """Voxels occupied at ``t``, sorted by packed key."""
        return unpack_keys(self.current_keys)


def bits_to_array(bits: np.ndarray, window: int) -> np.ndarray:
    """Expand bitmasks to (..., w) uint8 arrays ordered oldest to newest."""
    shifts = np.arange(window - 1, -1, -1, dtype=np.uint64)
    return ((np.asarray(bits, dtype=np.uint64)[..., None] >> shifts) & np.uint64(1)).astype(np.uint8)
