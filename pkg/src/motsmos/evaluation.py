"""Voxel-level IoU/mIoU for the moving class, point->voxel label lifting, sweeps."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from motsmos.errors import ConfigError, DataError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FrameEval:
    tp: int
    fp: int
    fn: int
    frame_index: int = 0

    @property
    def empty(self) -> bool:
        return self.tp + self.fp + self.fn == 0

    @property
    def iou(self) -> float:
        # nothing moving and nothing predicted counts as a perfect frame
        if self.empty:
            return 1.0
        return self.tp / (self.tp + self.fp + self.fn)


@dataclass
class SequenceEval:
    frames: list[FrameEval]

    @property
    def miou(self) -> float:
        return float(np.mean([f.iou for f in self.frames]))

    @property
    def empty_frames(self) -> int:
        return sum(f.empty for f in self.frames)


def lift_labels(point_moving, index_lists, rule: str = "any") -> np.ndarray:
    """Per-voxel moving flag from per-point flags.

    ``index_lists[i]`` holds the point indices of voxel ``i`` (a
    :class:`~motsmos.voxelgrid.Voxelization` is accepted too). ``rule`` is
    ``"any"`` (one moving point suffices) or ``"majority"`` (strictly more than
    half of the points).
    """
    moving = np.asarray(getattr(point_moving, "moving", point_moving), dtype=bool)
    if hasattr(index_lists, "index_lists"):
        index_lists = index_lists.index_lists()
    out = np.zeros(len(index_lists), dtype=bool)
    for i, idx in enumerate(index_lists):
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= len(moving)):
            raise DataError(f"voxel {i} references point {idx.max()} but only {len(moving)} labels exist")
        hits = moving[idx]
        if rule == "any":
            out[i] = hits.any()
        elif rule == "majority":
            out[i] = 2 * int(hits.sum()) > len(hits)
        else:
            raise ConfigError(f"unknown lift rule {rule!r}")
    return out


def frame_iou(pred, truth, universe=None, frame_index: int = 0) -> FrameEval:
    """IoU of the moving class from two voxel sets (any hashable voxel ids)."""
    pred, truth = set(pred), set(truth)
    if universe is not None:
        universe = set(universe)
        extra = (pred | truth) - universe
        if extra:
            raise DataError(f"{len(extra)} masked voxels lie outside the evaluation universe")
    tp = len(pred & truth)
    return FrameEval(tp, len(pred) - tp, len(truth) - tp, frame_index)


def frame_iou_masks(pred, truth, frame_index: int = 0) -> FrameEval:
    """IoU from boolean masks aligned over the same occupied voxels."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise DataError(f"prediction ({pred.shape}) and truth ({truth.shape}) masks differ in shape")
    tp = int((pred & truth).sum())
    return FrameEval(tp, int(pred.sum()) - tp, int(truth.sum()) - tp, frame_index)


def sequence_miou(frames: Sequence[FrameEval]) -> SequenceEval:
    frames = list(frames)
    if not frames:
        raise ConfigError("sequence_miou needs at least one frame")
    result = SequenceEval(frames)
    if result.empty_frames:
        log.info("%d frames had neither moving truth nor predictions (IoU 1.0)", result.empty_frames)
    return result


# -- sweeps ------------------------------------------------------------------


@dataclass
class SweepRow:
    config: dict
    scores: dict[str, float] = field(default_factory=dict)
    error: str | None = None

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.scores.values()))) if self.scores else math.nan

    @property
    def std(self) -> float:
        return float(np.std(list(self.scores.values()))) if self.scores else math.nan


@dataclass
class SweepResult:
    axes: list[str]
    rows: list[SweepRow]

    def scenes(self) -> list[str]:
        names: list[str] = []
        for row in self.rows:
            names += [s for s in row.scores if s not in names]
        return names

    def axis_summary(self) -> dict[str, dict]:
        """Mean and std of the per-row mean mIoU for each value of each axis."""
        out: dict[str, dict] = {}
        for axis in self.axes:
            groups: dict = {}
            for row in self.rows:
                if row.scores:
                    groups.setdefault(row.config[axis], []).append(row.mean)
            out[axis] = {v: (float(np.mean(s)), float(np.std(s))) for v, s in groups.items()}
        return out

    def to_csv(self) -> str:
        scenes = self.scenes()
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.axes + [f"miou_{s}" for s in scenes] + ["mean", "std", "error"])
        for row in self.rows:
            writer.writerow(
                [row.config[a] for a in self.axes]
                + [_fmt(row.scores.get(s, math.nan)) for s in scenes]
                + [_fmt(row.mean), _fmt(row.std), row.error or ""]
            )
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["axis", "value", "mean", "std"])
        for axis, values in self.axis_summary().items():
            for value, (mean, std) in values.items():
                writer.writerow([axis, value, _fmt(mean), _fmt(std)])
        return buf.getvalue()


def _fmt(v: float) -> str:
    return "nan" if v is None or math.isnan(v) else f"{v:.6f}"


def sweep(grid: Mapping[str, Sequence], run: Callable[[dict], Mapping[str, float]]) -> SweepResult:
    """Run ``run(config)`` over the Cartesian product of ``grid``.

    ``run`` returns per-scene mIoU. A failing cell is recorded with its error
    message and the sweep moves on.
    """
    axes = list(grid)
    rows = []
    for values in itertools.product(*(grid[a] for a in axes)):
        config = dict(zip(axes, values))
        try:
            scores = dict(run(config))
            rows.append(SweepRow(config, {k: float(v) for k, v in scores.items()}))
        except Exception as exc:  # noqa: BLE001 - cells fail independently
            log.error("sweep cell %s failed: %s", config, exc)
            rows.append(SweepRow(config, {}, f"{type(exc).__name__}: {exc}"))
    return SweepResult(axes, rows)
