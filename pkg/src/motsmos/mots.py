"""Multivariate occupancy time series (MOTS) features for occupied voxels.

A feature for voxel ``v`` at frame ``t`` is a ``C x w`` binary matrix whose
row ``c`` is the occupancy history of ``v + offsets[c]``.
"""

from __future__ import annotations

import itertools
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from motsmos.errors import ConfigError, FormatError
from motsmos.voxelgrid import (
    AXIS_BITS,
    GridConfig,
    SparseFrameState,
    Voxelization,
    bits_to_array,
)

CACHE_MAGIC = b"MOTS"
CACHE_VERSION = 1


def neighbor_offsets(r: int) -> np.ndarray:
    """All ``(dx, dy, dz)`` in ``{-r..r}^3``, lexicographically ascending, as a (C, 3) array."""
    if r < 0:
        raise ConfigError(f"radius must be >= 0, got {r}")
    rng = range(-r, r + 1)
    return np.array(list(itertools.product(rng, rng, rng)), dtype=np.int64)


def offset_deltas(offsets: np.ndarray) -> np.ndarray:
    """Packed-key increments for each offset (packing is linear per axis)."""
    offsets = np.asarray(offsets, dtype=np.int64)
    return (offsets[:, 0] << (2 * AXIS_BITS)) + (offsets[:, 1] << AXIS_BITS) + offsets[:, 2]


@dataclass
class MotsBatch:
    """All features of one frame, rows ordered by voxel key.

    ``features`` has shape (n, C, w) and dtype uint8.
    """

    coords: np.ndarray
    features: np.ndarray
    frame_index: int
    voxelization: Voxelization | None = None

    def __len__(self):
        return len(self.coords)

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def window(self) -> int:
        return self.features.shape[2]


def extract_frame(state: SparseFrameState, offsets: np.ndarray, chunk: int = 65536) -> MotsBatch:
    """Gather the MOTS of every voxel occupied at ``state.t``.

    Neighbors absent from the state read as all-zero histories.
    """
    offsets = np.asarray(offsets, dtype=np.int64)
    deltas = offset_deltas(offsets)
    centers = state.current_keys
    n, c, w = len(centers), len(offsets), state.window
    features = np.empty((n, c, w), dtype=np.uint8)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        neigh = centers[lo:hi, None] + deltas[None, :]
        features[lo:hi] = bits_to_array(state.lookup(neigh), w)
    return MotsBatch(state.current_coords, features, state.t, state.voxelization)


def extract_sequence(frames: Iterable, config: GridConfig) -> Iterator[MotsBatch]:
    """Advance a fresh state through ``frames`` and yield each frame's batch.

    Items of ``frames`` are anything :meth:`SparseFrameState.advance` accepts.
    """
    state = SparseFrameState(config.window)
    offsets = neighbor_offsets(config.radius)
    for occupied in frames:
        state.advance(occupied)
        yield extract_frame(state, offsets)


def write_cache(path: str | os.PathLike, batches: Iterable[MotsBatch], channels: int, window: int) -> int:
    """Write features to a cache file; returns the number of records.

    Layout: ``b"MOTS"``, then uint32 LE version, C, w. Each record is int32 LE
    ``ix, iy, iz, t`` followed by C rows of ``ceil(w/8)`` bytes (bits packed
    MSB first, oldest time step first).
    """
    count = 0
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<III", CACHE_VERSION, channels, window))
        for batch in batches:
            if batch.features.shape[1:] != (channels, window):
                raise FormatError(f"batch shape {batch.features.shape[1:]} != ({channels}, {window})")
            n = len(batch)
            if n == 0:
                continue
            head = np.empty((n, 4), dtype="<i4")
            head[:, :3] = batch.coords
            head[:, 3] = batch.frame_index
            packed = np.packbits(batch.features, axis=2).reshape(n, -1)
            fh.write(np.concatenate([head.view(np.uint8), packed], axis=1).tobytes())
            count += n
    return count


def read_cache(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`write_cache`: returns ``(coords, frame_indices, features)``."""
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != CACHE_MAGIC:
        raise FormatError(f"{path}: not a MOTS cache file")
    version, c, w = struct.unpack("<III", blob[4:16])
    if version != CACHE_VERSION:
        raise FormatError(f"{path}: unsupported cache version {version}")
    row_bytes = (w + 7) // 8
    rec = 16 + c * row_bytes
    body = np.frombuffer(blob, dtype=np.uint8, offset=16)
    if body.size % rec:
        raise FormatError(f"{path}: truncated record ({body.size % rec} trailing bytes)")
    body = body.reshape(-1, rec)
    head = body[:, :16].copy().view("<i4").reshape(-1, 4)
    bits = np.unpackbits(body[:, 16:].reshape(-1, c, row_bytes), axis=2)[:, :, :w]
    return head[:, :3].astype(np.int64), head[:, 3].astype(np.int64), bits
