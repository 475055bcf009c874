"""Labeled stationary LiDAR-like scenes: static boxes plus constant-velocity box movers.

Points are sampled uniformly on box surfaces (no ray casting). Static surfaces
are sampled once and re-emitted every frame with fresh Gaussian jitter; movers
are resampled on their translated surfaces each frame. An optional occlusion
pass keeps only the nearest return per angular bin seen from the sensor.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from motsmos.errors import ConfigError
from motsmos.ingest import PointFrame, PointLabels, save_labels, save_point_frame

_STATIC_STREAM = 2**31 - 1


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by its center and edge lengths (meters).

    A zero edge length makes it a plane. ``density`` is points per square
    meter of surface.
    """

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    density: float = 100.0

    def faces(self):
        """(origin, u-axis vector, v-axis vector, area) per face with non-zero area."""
        c = np.asarray(self.center, dtype=float)
        s = np.asarray(self.size, dtype=float)
        lo = c - s / 2
        out = []
        for axis in range(3):
            a, b = [i for i in range(3) if i != axis]
            area = s[a] * s[b]
            if area <= 0:
                continue
            u = np.zeros(3)
            u[a] = s[a]
            v = np.zeros(3)
            v[b] = s[b]
            offsets = (0.0,) if s[axis] == 0 else (0.0, s[axis])
            for off in offsets:
                origin = lo.copy()
                origin[axis] += off
                out.append((origin, u, v, area))
        return out

    def area(self) -> float:
        return float(sum(f[3] for f in self.faces()))


@dataclass(frozen=True)
class Mover:
    """A box translating with constant velocity (m/s).

    With ``wrap`` > 0 the travelled distance is taken modulo ``wrap`` meters,
    so the mover re-enters at its start position (a new object arriving).
    """

    box: Box
    velocity: tuple[float, float, float]
    wrap: float = 0.0

    def center_at(self, time_s: float) -> np.ndarray:
        v = np.asarray(self.velocity, dtype=float)
        speed = float(np.linalg.norm(v))
        dist = speed * time_s
        if self.wrap > 0 and speed > 0:
            dist = dist % self.wrap
        direction = v / speed if speed > 0 else v
        return np.asarray(self.box.center, dtype=float) + direction * dist

    def box_at(self, time_s: float) -> Box:
        return replace(self.box, center=tuple(self.center_at(time_s)))

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.velocity))


@dataclass(frozen=True)
class SceneSpec:
    name: str = "scene"
    frames: int = 200
    rate_hz: float = 10.0
    statics: tuple[Box, ...] = ()
    movers: tuple[Mover, ...] = ()
    noise: float = 0.02
    seed: int = 0
    occlusion: bool = False
    sensor_origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    occlusion_bins: tuple[float, float] = (0.2, 0.4)

    def __post_init__(self):
        if self.frames < 1:
            raise ConfigError(f"scene needs at least one frame, got {self.frames}")
        if not self.rate_hz > 0:
            raise ConfigError(f"frame rate must be positive, got {self.rate_hz}")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        for box in list(self.statics) + [m.box for m in self.movers]:
            if not box.density > 0:
                raise ConfigError(f"surface density must be positive, got {box.density}")
            if min(box.size) < 0:
                raise ConfigError(f"box size must be non-negative, got {box.size}")

    def validate_window(self, window: int) -> None:
        if self.frames < window:
            raise ConfigError(f"scene {self.name!r} has {self.frames} frames, fewer than window {window}")


def sample_surface(box: Box, rng: np.random.Generator) -> np.ndarray:
    """Poisson-count uniform samples over the box surface."""
    faces = box.faces()
    if not faces:
        return np.zeros((0, 3))
    parts = []
    for origin, u, v, area in faces:
        n = rng.poisson(box.density * area)
        st = rng.random((n, 2))
        parts.append(origin + st[:, :1] * u + st[:, 1:] * v)
    return np.concatenate(parts)


def occlusion_keep(points: np.ndarray, origin, bins=(0.2, 0.4), depth_tol: float = 0.1) -> np.ndarray:
    """Mask of points within ``depth_tol`` of the nearest return in their (azimuth, elevation) bin."""
    rel = points - np.asarray(origin, dtype=float)
    rng_ = np.linalg.norm(rel, axis=1)
    az = np.degrees(np.arctan2(rel[:, 1], rel[:, 0]))
    el = np.degrees(np.arctan2(rel[:, 2], np.hypot(rel[:, 0], rel[:, 1])))
    ia = np.floor((az + 180.0) / bins[0]).astype(np.int64)
    ie = np.floor((el + 90.0) / bins[1]).astype(np.int64)
    cell = ia * 100_000 + ie
    uniq, inv = np.unique(cell, return_inverse=True)
    nearest = np.full(len(uniq), np.inf)
    np.minimum.at(nearest, inv, rng_)
    return rng_ <= nearest[inv] + depth_tol


def generate(spec: SceneSpec) -> list[tuple[PointFrame, PointLabels]]:
    """All frames of a scene with per-point moving labels."""
    return [frame for frame in iter_frames(spec)]


def iter_frames(spec: SceneSpec):
    static_rng = np.random.default_rng([spec.seed, _STATIC_STREAM])
    static_pts = [sample_surface(b, static_rng) for b in spec.statics]
    static_pts = np.concatenate(static_pts) if static_pts else np.zeros((0, 3))
    for t in range(spec.frames):
        yield make_frame(spec, t, static_pts)


def make_frame(spec: SceneSpec, t: int, static_pts: np.ndarray) -> tuple[PointFrame, PointLabels]:
    rng = np.random.default_rng([spec.seed, t])
    time_s = t / spec.rate_hz
    mover_pts = [sample_surface(m.box_at(time_s), rng) for m in spec.movers]
    mover_pts = np.concatenate(mover_pts) if mover_pts else np.zeros((0, 3))
    pts = np.concatenate([static_pts, mover_pts])
    moving = np.concatenate([np.zeros(len(static_pts), bool), np.ones(len(mover_pts), bool)])
    if spec.noise > 0:
        pts = pts + rng.normal(scale=spec.noise, size=pts.shape)
    if spec.occlusion and len(pts):
        keep = occlusion_keep(pts, spec.sensor_origin, spec.occlusion_bins)
        pts, moving = pts[keep], moving[keep]
    intensity = np.where(moving, 0.6, 0.3)
    # the file format stores float32; round now so in-memory and on-disk frames agree
    pts = pts.astype(np.float32).astype(np.float64)
    return PointFrame(pts, intensity, t), PointLabels(moving, t)


def write_scene(spec: SceneSpec, out_dir: str | os.PathLike) -> int:
    """Write ``velodyne/NNNNNN.bin`` and ``labels/NNNNNN.label`` (0 static, 1 moving).

    Returns the number of frames written.
    """
    out = Path(out_dir)
    (out / "velodyne").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    count = 0
    for frame, labels in iter_frames(spec):
        save_point_frame(out / "velodyne" / f"{frame.frame_index:06d}.bin", frame)
        save_labels(out / "labels" / f"{frame.frame_index:06d}.label", labels)
        count += 1
    return count


# -- presets -----------------------------------------------------------------

GROUND_Z = -1.73
PEDESTRIAN_SPEED = 1.4
CAR_SPEED = 8.0


def _ground(density=8.0):
    return Box((0.0, 0.0, GROUND_Z), (40.0, 40.0, 0.0), density)


def _pedestrian(start_xy, velocity_xy, wrap, density=200.0):
    box = Box((start_xy[0], start_xy[1], GROUND_Z + 0.9), (0.5, 0.5, 1.8), density)
    return Mover(box, (velocity_xy[0], velocity_xy[1], 0.0), wrap)


def _car(start_xy, velocity_xy, wrap, density=150.0):
    box = Box((start_xy[0], start_xy[1], GROUND_Z + 0.3 + 0.75), (4.5, 1.8, 1.5), density)
    return Mover(box, (velocity_xy[0], velocity_xy[1], 0.0), wrap)


def _walls_and_pillars(density=100.0):
    walls = (
        Box((0.0, 12.0, GROUND_Z + 1.5), (24.0, 0.3, 3.0), density),
        Box((0.0, -12.0, GROUND_Z + 1.5), (24.0, 0.3, 3.0), density),
        Box((-18.0, 0.0, GROUND_Z + 1.5), (0.3, 10.0, 3.0), density),
    )
    pillars = tuple(
        Box((x, y, GROUND_Z + 2.0), (0.4, 0.4, 4.0), density)
        for x, y in [(6.0, 8.0), (-6.0, 8.0), (6.0, -8.5), (-6.0, -8.5), (10.0, 2.5)]
    )
    return walls + pillars


def presets(seed: int = 0, frames: int = 200) -> dict[str, SceneSpec]:
    ped_a = _pedestrian((2.0, -10.0), (0.0, PEDESTRIAN_SPEED), 20.0)
    ped_b = _pedestrian((-9.0, 3.0), (PEDESTRIAN_SPEED, 0.0), 18.0)
    car = _car((-14.0, -5.0), (CAR_SPEED, 0.0), 28.0)
    return {
        "crossing-pedestrians": SceneSpec("crossing-pedestrians", frames, 10.0, (_ground(),), (ped_a, ped_b), seed=seed),
        "passing-car": SceneSpec("passing-car", frames, 10.0, (_ground(),), (car,), seed=seed),
        "mixed-intersection": SceneSpec(
            "mixed-intersection", frames, 10.0, (_ground(),) + _walls_and_pillars(), (ped_a, ped_b, car), seed=seed
        ),
    }


def preset(name: str, seed: int = 0, frames: int = 200) -> SceneSpec:
    table = presets(seed, frames)
    if name not in table:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(table)}")
    return table[name]
