"""Diagonal-covariance Gaussian mixture fitted by EM, and the cluster -> moving mapping."""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from motsmos.errors import ConfigError, FormatError

log = logging.getLogger(__name__)

GMM_MAGIC = b"MGMM"
LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    seed: int = 0
    fitted: bool = True
    log_likelihood: list[float] = field(default_factory=list)
    reseeds: int = 0
    converged: bool = False

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_joint(self, x: np.ndarray) -> np.ndarray:
        """``log pi_j + log N(x | mu_j, diag var_j)`` for every sample/component, shape (n, k)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None]
        if x.shape[1] != self.dim:
            raise ConfigError(f"embedding dimension {x.shape[1]} != model dimension {self.dim}")
        prec = 1.0 / self.variances
        maha = np.empty((len(x), self.k))
        # direct differences (no expansion) to avoid cancellation; chunked to bound memory
        step = max(1, 4_000_000 // max(1, self.k * self.dim))
        for lo in range(0, len(x), step):
            d = x[lo : lo + step, None, :] - self.means[None]
            maha[lo : lo + step] = np.einsum("nke,ke->nk", d * d, prec)
        log_det = np.log(self.variances).sum(axis=1)
        return np.log(self.weights) - 0.5 * (self.dim * LOG_2PI + log_det + maha)


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``k`` initial centers chosen by D^2 sampling."""
    n = len(x)
    first = int(rng.integers(n))
    chosen = [first]
    d2 = ((x - x[first]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        u = rng.random()
        if total <= 0:
            idx = int(u * n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2 / total), u, side="right"))
            idx = min(idx, n - 1)
        chosen.append(idx)
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(chosen)


def fit_gmm(
    samples,
    k: int,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-4,
    var_floor: float = 1e-6,
    init_means: np.ndarray | None = None,
) -> GmmModel:
    """EM for a k-component diagonal GMM.

    Initial means come from k-means++ on ``seed`` unless ``init_means`` is
    given; initial variances are the pooled per-dimension variance and weights
    are uniform. Stops when the mean log-likelihood improves by less than
    ``tol``. A component whose responsibility mass vanishes is moved onto the
    sample with the lowest likelihood under the current mixture.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ConfigError("fit_gmm needs a non-empty (n, e) sample array")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if k > len(x):
        raise ConfigError(f"k={k} exceeds the number of samples ({len(x)})")
    n, e = x.shape
    rng = np.random.default_rng(seed)
    if init_means is None:
        if k > len(np.unique(x, axis=0)):
            raise ConfigError(f"k={k} exceeds the number of distinct samples")
        means = x[kmeans_plus_plus(x, k, rng)].copy()
    else:
        means = np.array(init_means, dtype=np.float64).reshape(k, e)
    variances = np.tile(np.maximum(x.var(axis=0), var_floor), (k, 1))
    model = GmmModel(np.full(k, 1.0 / k), means, variances, seed)

    min_mass = 1e-10 * n
    prev = -np.inf
    for it in range(max_iter):
        lj = model.log_joint(x)
        norm = logsumexp(lj, axis=1)
        mean_ll = float(norm.mean())
        model.log_likelihood.append(mean_ll)
        if mean_ll - prev < tol and it > 0:
            model.converged = True
            break
        prev = mean_ll
        resp = np.exp(lj - norm[:, None])
        mass = resp.sum(axis=0)

        dead = np.flatnonzero(mass < min_mass)
        if len(dead):
            worst = np.argsort(norm, kind="stable")
            for j, idx in zip(dead, worst):
                log.warning("GMM component %d lost its mass at iteration %d; re-seeding", j, it)
                resp[:, j] = 0.0
                resp[idx, :] = 0.0
                resp[idx, j] = 1.0
            model.reseeds += len(dead)
            mass = resp.sum(axis=0)

        model.weights = mass / n
        model.means = (resp.T @ x) / mass[:, None]
        sq = np.zeros((k, e))
        step = max(1, 4_000_000 // (k * e))
        for lo in range(0, n, step):
            d = x[lo : lo + step, None, :] - model.means[None]
            sq += np.einsum("nk,nke->ke", resp[lo : lo + step], d * d)
        model.variances = np.maximum(sq / mass[:, None], var_floor)
    return model


def sample_for_fit(embeddings_per_frame, first_n_frames: int = 10, target: int = 200_000, seed: int = 0):
    """Uniform sample without replacement from the pooled first ``first_n_frames`` frames.

    Returns ``(samples, origin)`` where ``origin[i]`` is the frame position
    (within ``embeddings_per_frame``) that sample ``i`` came from.
    """
    frames = [np.asarray(f, dtype=np.float64) for f in list(embeddings_per_frame)[:first_n_frames]]
    if not frames:
        raise ConfigError("sample_for_fit needs at least one frame")
    pool = np.concatenate(frames)
    origin = np.concatenate([np.full(len(f), i) for i, f in enumerate(frames)])
    if len(pool) <= target:
        return pool, origin
    pick = np.sort(np.random.default_rng(seed).choice(len(pool), size=target, replace=False))
    return pool[pick], origin[pick]


def responsibilities(model: GmmModel, z) -> np.ndarray:
    lj = model.log_joint(z)
    return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))


def assign(model: GmmModel, z) -> tuple[np.ndarray, np.ndarray]:
    """Most responsible component (lowest id on ties) and the responsibilities.

    Accepts a single embedding or an (n, e) array.
    """
    if not model.fitted:
        raise ConfigError("GMM is not fitted")
    resp = responsibilities(model, z)
    labels = np.argmax(resp, axis=1)
    if np.asarray(z).ndim == 1:
        return labels[0], resp[0]
    return labels, resp


@dataclass
class ClusterMapping:
    moving_clusters: frozenset[int]
    ious: np.ndarray
    threshold: float = 0.15
    warning: str | None = None

    def __post_init__(self):
        self.moving_clusters = frozenset(int(c) for c in self.moving_clusters)
        self.ious = np.asarray(self.ious, dtype=np.float64)


def map_clusters(assignments, reference_moving, k: int, threshold: float = 0.15) -> ClusterMapping:
    """Mark every cluster whose IoU with the reference moving mask reaches ``threshold``.

    ``assignments`` are cluster ids of the reference frame's occupied voxels;
    ``reference_moving`` is a boolean mask over the same voxels.
    """
    labels = np.asarray(assignments)
    truth = np.asarray(reference_moving, dtype=bool)
    if labels.shape != truth.shape:
        raise ConfigError(f"assignments ({labels.shape}) and mask ({truth.shape}) differ in shape")
    ious = np.zeros(k)
    n_truth = int(truth.sum())
    for c in range(k):
        in_c = labels == c
        union = int((in_c | truth).sum())
        ious[c] = (in_c & truth).sum() / union if union else 0.0
    warning = None
    if n_truth == 0:
        warning = "reference frame has no moving voxels; no cluster can be mapped to moving"
        log.warning(warning)
    moving = {c for c in range(k) if n_truth and ious[c] >= threshold}
    return ClusterMapping(frozenset(moving), ious, threshold, warning)


def segment(model: GmmModel, mapping: ClusterMapping, embeddings) -> np.ndarray:
    """Boolean moving mask over the rows of ``embeddings``."""
    z = np.asarray(embeddings, dtype=np.float64).reshape(-1, model.dim)
    if len(z) == 0:
        return np.zeros(0, dtype=bool)
    labels, _ = assign(model, z)
    return np.isin(labels, np.fromiter(mapping.moving_clusters, dtype=np.int64, count=len(mapping.moving_clusters)))


def save_gmm(path: str | os.PathLike, model: GmmModel, mapping: ClusterMapping | None = None) -> None:
    """``b"MGMM"``, uint32 LE k, e, then float32 LE weights (k), means (k*e),
    variances (k*e); then uint32 flag (1 if a mapping follows), and for the
    mapping float32 threshold, float32 IoUs (k), uint32 count, uint32 ids."""
    k, e = model.k, model.dim
    parts = [GMM_MAGIC, struct.pack("<II", k, e)]
    for arr in (model.weights, model.means, model.variances):
        parts.append(np.asarray(arr, dtype="<f4").tobytes())
    if mapping is None:
        parts.append(struct.pack("<I", 0))
    else:
        ids = sorted(mapping.moving_clusters)
        parts.append(struct.pack("<If", 1, mapping.threshold))
        parts.append(np.asarray(mapping.ious, dtype="<f4").tobytes())
        parts.append(struct.pack("<I", len(ids)))
        parts.append(np.asarray(ids, dtype="<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_gmm(path: str | os.PathLike) -> tuple[GmmModel, ClusterMapping | None]:
    blob = Path(path).read_bytes()
    if blob[:4] != GMM_MAGIC:
        raise FormatError(f"{path}: not a GMM file")
    try:
        k, e = struct.unpack_from("<II", blob, 4)
        off = 12
        weights = np.frombuffer(blob, "<f4", k, off).astype(np.float64)
        off += 4 * k
        means = np.frombuffer(blob, "<f4", k * e, off).astype(np.float64).reshape(k, e)
        off += 4 * k * e
        variances = np.frombuffer(blob, "<f4", k * e, off).astype(np.float64).reshape(k, e)
        off += 4 * k * e
        (has_mapping,) = struct.unpack_from("<I", blob, off)
        off += 4
        mapping = None
        if has_mapping:
            (threshold,) = struct.unpack_from("<f", blob, off)
            off += 4
            ious = np.frombuffer(blob, "<f4", k, off).astype(np.float64)
            off += 4 * k
            (count,) = struct.unpack_from("<I", blob, off)
            off += 4
            ids = np.frombuffer(blob, "<u4", count, off)
            off += 4 * count
            mapping = ClusterMapping(frozenset(ids.tolist()), ious, float(np.float32(threshold)))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated GMM file") from exc
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} unexpected trailing bytes")
    # float32 storage breaks exact normalization
    weights = weights / weights.sum()
    return GmmModel(weights, means, variances), mapping
