"""End-to-end pipeline: frames -> voxels -> MOTS -> embeddings -> GMM -> moving masks."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from motsmos import autoencoder as ae
from motsmos.clustering import ClusterMapping, GmmModel, assign, fit_gmm, map_clusters, sample_for_fit, segment
from motsmos.config import PipelineConfig
from motsmos.errors import ConfigError, DataError
from motsmos.evaluation import FrameEval, SequenceEval, frame_iou_masks, lift_labels, sequence_miou
from motsmos.ingest import (
    PointFrame,
    PointLabels,
    Pose,
    apply_pose,
    load_labels,
    load_point_frame_with_mask,
    load_poses,
    remove_ground,
)
from motsmos.mots import MotsBatch, extract_frame, neighbor_offsets
from motsmos.voxelgrid import SparseFrameState, Voxelization, voxelize

log = logging.getLogger(__name__)


@dataclass
class FrameData:
    """One preprocessed frame.

    ``keep`` indexes the loaded (finite) points that survived ground removal;
    ``file_mask`` flags which file records were finite. ``truth`` is the
    per-voxel moving flag when labels are available.
    """

    index: int
    voxels: Voxelization
    keep: np.ndarray
    file_mask: np.ndarray
    truth: np.ndarray | None = None


def frame_files(frames_dir: str | Path) -> list[Path]:
    root = Path(frames_dir)
    if not root.is_dir():
        raise DataError(f"frames directory {root} does not exist")
    if (root / "velodyne").is_dir():
        root = root / "velodyne"
    files = sorted(root.glob("*.bin"))
    if not files:
        raise DataError(f"no .bin frames in {root}")
    return files


def label_dir_for(cfg: PipelineConfig) -> Path | None:
    if cfg.data.labels:
        path = Path(cfg.data.labels)
        if not path.is_dir():
            raise DataError(f"labels directory {path} does not exist")
        return path
    guess = Path(cfg.data.frames) / "labels"
    return guess if guess.is_dir() else None


def preprocess(
    frame: PointFrame,
    labels: PointLabels | None,
    cfg: PipelineConfig,
    pose: Pose | None = None,
    reference: Pose | None = None,
    file_mask: np.ndarray | None = None,
) -> FrameData:
    if pose is not None:
        frame = apply_pose(frame, pose, reference)
    kept, keep = remove_ground(frame, cfg.eval.ground_z)
    vox = voxelize(kept, cfg.grid.m)
    truth = None
    if labels is not None:
        truth = lift_labels(labels.moving[keep], vox, cfg.eval.lift_rule)
    if file_mask is None:
        file_mask = np.ones(len(frame), dtype=bool)
    return FrameData(frame.frame_index, vox, keep, file_mask, truth)


def load_sequence(cfg: PipelineConfig) -> list[FrameData]:
    """Load and preprocess every frame listed in ``cfg.data.frames``."""
    files = frame_files(cfg.data.frames)
    labels_dir = label_dir_for(cfg)
    poses = load_poses(cfg.data.poses) if cfg.data.poses else None
    if poses is not None and len(poses) < len(files):
        raise DataError(f"{len(poses)} poses for {len(files)} frames")
    out = []
    for t, path in enumerate(files):
        frame, mask = load_point_frame_with_mask(path, t)
        labels = None
        if labels_dir is not None:
            lab_path = labels_dir / (path.stem + ".label")
            if not lab_path.is_file():
                raise DataError(f"missing label file {lab_path}")
            raw = load_labels(lab_path, set(cfg.data.moving_labels), t)
            if len(raw) != len(mask):
                raise DataError(f"{lab_path}: {len(raw)} labels for {len(mask)} points")
            labels = PointLabels(raw.moving[mask], t)
        pose = poses[t] if poses is not None else None
        out.append(preprocess(frame, labels, cfg, pose, poses[0] if poses else None, mask))
    if frames_dropped := sum(int((~f.file_mask).sum()) for f in out):
        log.info("dropped %d non-finite points", frames_dropped)
    return out


def iter_mots(frames: Sequence[FrameData], cfg: PipelineConfig, stop: int | None = None) -> Iterator[MotsBatch]:
    state = SparseFrameState(cfg.grid.w)
    offsets = neighbor_offsets(cfg.grid.r)
    for fd in frames[:stop]:
        state.advance(fd.voxels)
        yield extract_frame(state, offsets)


def architecture(cfg: PipelineConfig) -> ae.AeArchitecture:
    C = (2 * cfg.grid.r + 1) ** 3
    return ae.AeArchitecture(
        C,
        cfg.grid.w,
        tuple(cfg.model.channels) or None,
        cfg.model.fc_hidden,
        cfg.model.e,
        cfg.model.literal_relu,
    )


def collect_training_features(frames: Sequence[FrameData], cfg: PipelineConfig) -> np.ndarray:
    """Features of the post-warm-up frames, uniformly subsampled to ``train.max_samples`` (0 = all)."""
    usable = max(0, len(frames) - cfg.warmup)
    if usable == 0:
        raise ConfigError(f"sequence of {len(frames)} frames is shorter than the window ({cfg.grid.w})")
    total = sum(len(f.voxels) for f in frames[cfg.warmup :])
    limit = cfg.train.max_samples or total
    rate = min(1.0, limit / max(total, 1))
    rng = np.random.default_rng([cfg.seed, 1])
    parts = []
    for batch in iter_mots(frames, cfg):
        if batch.frame_index < cfg.warmup or len(batch) == 0:
            continue
        if rate < 1.0:
            take = rng.random(len(batch)) < rate
            parts.append(batch.features[take])
        else:
            parts.append(batch.features)
    data = np.concatenate(parts) if parts else np.zeros((0, (2 * cfg.grid.r + 1) ** 3, cfg.grid.w), np.uint8)
    if len(data) == 0:
        raise DataError("no occupied voxels to train on")
    return data[:limit]


def train_model(frames: Sequence[FrameData], cfg: PipelineConfig, progress=None):
    data = collect_training_features(frames, cfg)
    log.info("training on %d MOTS features of shape %s", len(data), data.shape[1:])
    hyper = ae.TrainConfig(
        cfg.train.batch, cfg.train.lr, cfg.train.epochs, cfg.seed, cfg.train.log_every, dtype=np.float32
    )
    # float32 throughout, so the in-memory model is exactly what the model file holds
    return ae.train(data, architecture(cfg), hyper, progress=progress)


def embed_batch(params: ae.AeParameters, batch: MotsBatch, chunk: int = 4096) -> np.ndarray:
    if len(batch) == 0:
        return np.zeros((0, params.arch.code_size))
    return np.concatenate(
        [ae.encode_batch(params, batch.features[lo : lo + chunk]) for lo in range(0, len(batch), chunk)]
    )


@dataclass
class ClusterFit:
    model: GmmModel
    mapping: ClusterMapping


def fit_clusters(frames: Sequence[FrameData], params: ae.AeParameters, cfg: PipelineConfig) -> ClusterFit:
    """GMM on a sample of the first ``gmm.first_n_frames`` post-warm-up frames, mapped on the reference frame."""
    start = cfg.warmup
    ref = cfg.reference_frame
    if start >= len(frames):
        raise ConfigError(f"sequence of {len(frames)} frames is shorter than the window ({cfg.grid.w})")
    if ref >= len(frames):
        raise ConfigError(f"reference frame {ref} beyond the sequence ({len(frames)} frames)")
    if frames[ref].truth is None:
        raise DataError("cluster mapping needs labels for the reference frame")
    stop = max(start + cfg.gmm.first_n_frames, ref + 1)
    per_frame = {}
    for batch in iter_mots(frames, cfg, stop):
        if batch.frame_index >= start or batch.frame_index == ref:
            per_frame[batch.frame_index] = embed_batch(params, batch)
    fit_frames = [per_frame[t] for t in range(start, min(start + cfg.gmm.first_n_frames, len(frames)))]
    samples, _ = sample_for_fit(fit_frames, cfg.gmm.first_n_frames, cfg.gmm.sample_target, cfg.seed)
    model = fit_gmm(
        samples,
        cfg.gmm.k,
        cfg.seed,
        max_iter=cfg.gmm.max_iter,
        tol=cfg.gmm.tol,
        var_floor=cfg.gmm.var_floor,
    )
    log.info("GMM: %d iterations, mean log-likelihood %.4f", len(model.log_likelihood), model.log_likelihood[-1])
    ref_labels, _ = assign(model, per_frame[ref])
    mapping = map_clusters(ref_labels, frames[ref].truth, cfg.gmm.k, cfg.gmm.threshold)
    log.info("clusters mapped to moving: %s", sorted(mapping.moving_clusters))
    return ClusterFit(model, mapping)


@dataclass
class FramePrediction:
    index: int
    coords: np.ndarray
    moving: np.ndarray


def segment_frames(
    frames: Sequence[FrameData], params: ae.AeParameters, fit: ClusterFit, cfg: PipelineConfig
) -> list[FramePrediction]:
    out = []
    for batch in iter_mots(frames, cfg):
        z = embed_batch(params, batch)
        out.append(FramePrediction(batch.frame_index, batch.coords, segment(fit.model, fit.mapping, z)))
    return out


def evaluate(frames: Sequence[FrameData], predictions: Sequence[FramePrediction], cfg: PipelineConfig) -> SequenceEval:
    """Per-frame IoU over frames from the warm-up index on."""
    evals: list[FrameEval] = []
    for fd, pred in zip(frames, predictions):
        if fd.index < cfg.warmup:
            continue
        if fd.truth is None:
            raise DataError(f"frame {fd.index} has no labels")
        evals.append(frame_iou_masks(pred.moving, fd.truth, fd.index))
    return sequence_miou(evals)


# -- exports -----------------------------------------------------------------


def predictions_csv(predictions: Sequence[FramePrediction]) -> str:
    buf = io.StringIO()
    buf.write("ix,iy,iz,t,label\n")
    for p in predictions:
        for (x, y, z), m in zip(p.coords.tolist(), p.moving.tolist()):
            buf.write(f"{x},{y},{z},{p.index},{int(m)}\n")
    return buf.getvalue()


def read_predictions_csv(path: str | Path) -> dict[int, dict[tuple[int, int, int], bool]]:
    out: dict[int, dict[tuple[int, int, int], bool]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["ix", "iy", "iz", "t", "label"]:
            raise DataError(f"{path}: expected header ix,iy,iz,t,label")
        for row in reader:
            key = (int(row["ix"]), int(row["iy"]), int(row["iz"]))
            out.setdefault(int(row["t"]), {})[key] = row["label"] == "1"
    return out


def point_predictions(fd: FrameData, pred: FramePrediction) -> np.ndarray:
    """Per-record flags over the original file (ground, non-finite points -> static)."""
    kept = np.zeros(len(fd.keep), dtype=bool)
    kept[fd.voxels.order] = np.repeat(pred.moving, np.diff(fd.voxels.starts))
    loaded = np.zeros(int(fd.file_mask.sum()), dtype=bool)
    loaded[fd.keep] = kept
    out = np.zeros(len(fd.file_mask), dtype=bool)
    out[fd.file_mask] = loaded
    return out


def evaluate_prediction_table(
    frames: Sequence[FrameData], table: dict[int, dict[tuple[int, int, int], bool]], cfg: PipelineConfig
) -> SequenceEval:
    evals = []
    for fd in frames:
        if fd.index < cfg.warmup:
            continue
        if fd.truth is None:
            raise DataError(f"frame {fd.index} has no labels")
        coords = [tuple(c) for c in fd.voxels.coords.tolist()]
        frame_pred = table.get(fd.index, {})
        extra = set(frame_pred) - set(coords)
        if extra:
            raise DataError(f"frame {fd.index}: {len(extra)} predicted voxels are not occupied")
        pred = np.array([frame_pred.get(c, False) for c in coords], dtype=bool)
        evals.append(frame_iou_masks(pred, fd.truth, fd.index))
    return sequence_miou(evals)


def eval_csv(result: SequenceEval) -> str:
    buf = io.StringIO()
    buf.write("frame,tp,fp,fn,iou\n")
    for f in result.frames:
        buf.write(f"{f.frame_index},{f.tp},{f.fp},{f.fn},{f.iou:.6f}\n")
    buf.write(f"miou,,,,{result.miou:.6f}\n")
    return buf.getvalue()


@dataclass
class RunResult:
    params: ae.AeParameters
    curve: list
    fit: ClusterFit
    predictions: list[FramePrediction]
    evaluation: SequenceEval | None = None


def run(frames: Sequence[FrameData], cfg: PipelineConfig, progress=None) -> RunResult:
    """Train, cluster, segment and (when labels exist) evaluate one sequence."""
    cfg.validate()
    if len(frames) == 0:
        raise DataError("no frames")
    params, curve = train_model(frames, cfg, progress)
    fit = fit_clusters(frames, params, cfg)
    preds = segment_frames(frames, params, fit, cfg)
    result = None
    if all(f.truth is not None for f in frames):
        result = evaluate(frames, preds, cfg)
        log.info("mIoU %.4f over %d frames", result.miou, len(result.frames))
    return RunResult(params, curve, fit, preds, result)
