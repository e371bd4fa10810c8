#!/usr/bin/env python3
"""
synthlidar.py
--------------------------------
Deterministic synthetic Lidar-video scenes and the LSEQ dataset format.

Objects are boxes on a flat ground plane moving rigidly (constant
velocity plus constant yaw rate). A sensor at the origin sees the box
faces turned towards it; points are sampled on those faces with a
density falling off with range, perturbed by clipped Gaussian noise.
Uniform ground clutter is added, and in non-target frames an object may
be dropped entirely (occlusion dropout), which is what makes temporal
context informative.

LSEQ layout (little-endian):

    "LSEQ" | version u32 | sequence count u32
    per sequence: frame count u32 | target index u32
    per frame: point count u32 | points 4×f32 each | gt count u32 | per box 7×f32 + class u32
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .binio import ByteReader, ByteWriter
from .errors import ConfigError, FormatError, GenerationError
from .params import make_rng
from .pillars import GtBox, PointFrame, SequenceSample, wrap_angle

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"LSEQ"
DATASET_VERSION = 1

PLACEMENT_ATTEMPTS = 100
SENSOR_CLEARANCE = 0.5
OBJECT_GAP = 0.2

# (l, w, h) per class id
CLASS_TEMPLATES = {
    0: (4.2, 1.9, 1.6),   # car
    1: (0.8, 0.8, 1.7),   # pedestrian
}


@dataclass(frozen=True)
class SceneConfig:
    x_range: Tuple[float, float] = (-6.4, 6.4)
    y_range: Tuple[float, float] = (-6.4, 6.4)
    ground_z: float = -1.8
    objects: Tuple[int, int] = (1, 3)
    class_probs: Tuple[float, ...] = (0.6, 0.4)
    size_jitter: float = 0.1
    speed: Tuple[float, float] = (0.0, 0.3)
    yaw_rate: float = 0.05
    point_density: float = 40.0
    reference_range: float = 5.0
    clutter_points: int = 30
    occlusion_dropout: float = 0.0
    frames: int = 7
    noise_sigma: float = 0.02
    margin: float = 0.3
    seed: int = 0

    def validate(self) -> "SceneConfig":
        if self.objects[0] < 0 or self.objects[1] < self.objects[0]:
            raise ConfigError(f"scene.objects range {self.objects} is invalid")
        if len(self.class_probs) != len(CLASS_TEMPLATES) or abs(sum(self.class_probs) - 1.0) > 1e-6:
            raise ConfigError("scene.class_probs must give one probability per class summing to 1")
        if self.point_density <= 0 or self.reference_range <= 0:
            raise ConfigError("scene densities must be positive")
        if self.frames < 1:
            raise ConfigError("scene.frames must be at least 1")
        if not 0.0 <= self.occlusion_dropout <= 1.0:
            raise ConfigError(f"scene.occlusion_dropout must lie in [0, 1], got {self.occlusion_dropout}")
        return self

    @property
    def target_index(self) -> int:
        return self.frames // 2

    def class_stats(self) -> np.ndarray:
        """Template (l, w, h, z) per class, z being the centre of a box resting on the ground."""
        return np.array([[l, w, h, self.ground_z + h / 2] for l, w, h in
                         (CLASS_TEMPLATES[c] for c in sorted(CLASS_TEMPLATES))])


@dataclass
class _Track:
    class_id: int
    size: np.ndarray      # l, w, h
    start: np.ndarray     # x, y at frame 0
    velocity: np.ndarray  # dx, dy per frame
    yaw0: float
    yaw_rate: float
    reflectance: float

    def box(self, frame: int, ground_z: float) -> GtBox:
        x, y = self.start + self.velocity * frame
        l, w, h = self.size
        return GtBox(float(x), float(y), ground_z + h / 2, float(l), float(w), float(h),
                     wrap_angle(self.yaw0 + self.yaw_rate * frame), self.class_id)


def _corners_xy(box: GtBox) -> np.ndarray:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = np.array([[1, 1], [1, -1], [-1, -1], [-1, 1]]) * [box.l / 2, box.w / 2]
    return local @ np.array([[c, s], [-s, c]]) + [box.x, box.y]


def _separated(a: np.ndarray, b: np.ndarray, gap: float) -> bool:
    """Separating-axis test for two BEV rectangles given as 4 corners each."""
    for poly in (a, b):
        for i in range(2):
            edge = poly[i + 1] - poly[i]
            axis = np.array([-edge[1], edge[0]]) / np.linalg.norm(edge)
            pa, pb = a @ axis, b @ axis
            if pa.max() + gap <= pb.min() or pb.max() + gap <= pa.min():
                return True
    return False


def _fits(track: _Track, cfg: SceneConfig, others: List[_Track]) -> bool:
    """In bounds, clear of the sensor and of every placed track, in every frame."""
    for t in range(cfg.frames):
        box = track.box(t, cfg.ground_z)
        corners = _corners_xy(box)
        if (corners[:, 0].min() < cfg.x_range[0] + cfg.margin or corners[:, 0].max() > cfg.x_range[1] - cfg.margin
                or corners[:, 1].min() < cfg.y_range[0] + cfg.margin or corners[:, 1].max() > cfg.y_range[1] - cfg.margin):
            return False
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        lx, ly = -(c * box.x + s * box.y), s * box.x - c * box.y
        if abs(lx) < box.l / 2 + SENSOR_CLEARANCE and abs(ly) < box.w / 2 + SENSOR_CLEARANCE:
            return False
        for other in others:
            if not _separated(corners, _corners_xy(other.box(t, cfg.ground_z)), OBJECT_GAP):
                return False
    return True


def _draw_track(cfg: SceneConfig, rng: np.random.Generator) -> _Track:
    class_id = int(rng.choice(len(cfg.class_probs), p=np.asarray(cfg.class_probs)))
    size = np.asarray(CLASS_TEMPLATES[class_id]) * rng.uniform(1 - cfg.size_jitter, 1 + cfg.size_jitter, 3)
    start = np.array([rng.uniform(*cfg.x_range), rng.uniform(*cfg.y_range)])
    yaw0 = float(rng.uniform(-math.pi, math.pi))
    speed = float(rng.uniform(*cfg.speed))
    velocity = speed * np.array([math.cos(yaw0), math.sin(yaw0)])
    yaw_rate = float(rng.uniform(-cfg.yaw_rate, cfg.yaw_rate))
    return _Track(class_id, size, start, velocity, yaw0, yaw_rate, float(rng.uniform(0.3, 1.0)))


def _visible_faces(box: GtBox) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Faces turned towards the sensor at the origin as (origin, edge_u, edge_v) in world frame."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    ax = np.array([c, s, 0.0])
    ay = np.array([-s, c, 0.0])
    az = np.array([0.0, 0.0, 1.0])
    center = np.array([box.x, box.y, box.z])
    half = np.array([box.l, box.w, box.h]) / 2
    faces = []
    for axis, h_n, (u, h_u), (v, h_v) in ((ax, half[0], (ay, half[1]), (az, half[2])),
                                         (ay, half[1], (ax, half[0]), (az, half[2])),
                                         (az, half[2], (ax, half[0]), (ay, half[1]))):
        for sign in ((1.0,) if axis is az else (1.0, -1.0)):
            normal = sign * axis
            face_center = center + normal * h_n
            if np.dot(normal, face_center) < 0:
                faces.append((face_center - u * h_u - v * h_v, 2 * h_u * u, 2 * h_v * v))
    return faces


def _sample_object(box: GtBox, reflectance: float, cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    faces = _visible_faces(box)
    chunks = []
    for origin, eu, ev in faces:
        area = float(np.linalg.norm(eu) * np.linalg.norm(ev))
        mid = origin + (eu + ev) / 2
        r = max(math.hypot(mid[0], mid[1]), 1.0)
        count = int(rng.poisson(cfg.point_density * (cfg.reference_range / r) ** 2 * area))
        if count:
            uv = rng.random((count, 2))
            chunks.append(origin + uv[:, :1] * eu + uv[:, 1:] * ev)
    if not chunks and faces:
        areas = [np.linalg.norm(eu) * np.linalg.norm(ev) for _, eu, ev in faces]
        origin, eu, ev = faces[int(np.argmax(areas))]
        uv = rng.random((1, 2))
        chunks.append(origin + uv[:, :1] * eu + uv[:, 1:] * ev)
    if not chunks:
        return np.zeros((0, 4))
    xyz = np.concatenate(chunks)
    # noise is drawn in the box frame and clipped per axis
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    noise = np.clip(rng.normal(0.0, cfg.noise_sigma, xyz.shape), -cfg.noise_sigma, cfg.noise_sigma)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    xyz = xyz + noise @ rot.T
    refl = np.clip(reflectance + rng.normal(0.0, 0.05, (xyz.shape[0], 1)), 0.0, 1.0)
    return np.concatenate([xyz, refl], axis=1)


def _clutter(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.clutter_points
    if n <= 0:
        return np.zeros((0, 4))
    pts = np.empty((n, 4))
    pts[:, 0] = rng.uniform(*cfg.x_range, n)
    pts[:, 1] = rng.uniform(*cfg.y_range, n)
    pts[:, 2] = cfg.ground_z + np.clip(rng.normal(0.0, cfg.noise_sigma, n), -cfg.noise_sigma, cfg.noise_sigma)
    pts[:, 3] = rng.uniform(0.0, 0.3, n)
    return pts


def generate_sequence(cfg: SceneConfig, seed: int) -> SequenceSample:
    """One sequence of cfg.frames frames, target in the middle; pure in (cfg, seed)."""
    cfg.validate()
    rng = make_rng(seed, 1)
    count = int(rng.integers(cfg.objects[0], cfg.objects[1] + 1))
    tracks: List[_Track] = []
    for i in range(count):
        for _ in range(PLACEMENT_ATTEMPTS):
            track = _draw_track(cfg, rng)
            if _fits(track, cfg, tracks):
                tracks.append(track)
                break
        else:
            raise GenerationError(
                f"Could not place object {i + 1} of {count} without overlap after {PLACEMENT_ATTEMPTS} attempts"
            )

    target = cfg.target_index
    frames = []
    for t in range(cfg.frames):
        boxes = [tr.box(t, cfg.ground_z) for tr in tracks]
        chunks = [_clutter(cfg, rng)]
        for tr, box in zip(tracks, boxes):
            dropped = t != target and rng.random() < cfg.occlusion_dropout
            if not dropped:
                chunks.append(_sample_object(box, tr.reflectance, cfg, rng))
        frames.append(PointFrame(np.concatenate(chunks).astype(np.float32), boxes))
    return SequenceSample(frames, target)


def sequence_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([int(base), int(index)]).generate_state(1, np.uint32)[0])


def generate_dataset(cfg: SceneConfig, count: int, seed: Optional[int] = None) -> List[SequenceSample]:
    base = cfg.seed if seed is None else seed
    samples = [generate_sequence(cfg, sequence_seed(base, i)) for i in range(count)]
    logger.info("Generated %d sequences (seed %d)", count, base)
    return samples


def points_in_box(points: np.ndarray, box: GtBox, inflate: float = 0.0) -> np.ndarray:
    """Boolean mask of points inside the box, each half-extent grown by `inflate`."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx, dy = pts[:, 0] - box.x, pts[:, 1] - box.y
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    lz = pts[:, 2] - box.z
    eps = 1e-6
    return ((np.abs(lx) <= box.l / 2 + inflate + eps) & (np.abs(ly) <= box.w / 2 + inflate + eps)
            & (np.abs(lz) <= box.h / 2 + inflate + eps))


# -------------------- LSEQ persistence --------------------

def dataset_bytes(samples: Sequence[SequenceSample]) -> bytes:
    out = ByteWriter()
    out.raw(DATASET_MAGIC)
    out.u32(DATASET_VERSION)
    out.u32(len(samples))
    for seq in samples:
        out.u32(len(seq.frames))
        out.u32(seq.target_index)
        for frame in seq.frames:
            out.u32(frame.points.shape[0])
            out.f32(frame.points.reshape(-1))
            out.u32(len(frame.gt_boxes))
            for box in frame.gt_boxes:
                out.f32(box.as_array())
                out.u32(box.class_id)
    return out.getvalue()


def parse_dataset(data: bytes) -> List[SequenceSample]:
    r = ByteReader(data)
    r.expect(DATASET_MAGIC, "dataset magic")
    r.expect_u32(DATASET_VERSION, "dataset version")
    samples = []
    for _ in range(r.u32("sequence count")):
        n_frames = r.u32("frame count")
        start = r.offset
        target = r.u32("target index")
        if n_frames and target >= n_frames:
            raise FormatError(f"target index {target} outside {n_frames} frames", start)
        frames = []
        for _ in range(n_frames):
            n_points = r.u32("point count")
            points = r.f32(4 * n_points, "points").reshape(n_points, 4)
            boxes = []
            for _ in range(r.u32("gt count")):
                values = r.f32(7, "gt box")
                boxes.append(GtBox.from_array(values, r.u32("class id")))
            frames.append(PointFrame(points, boxes))
        samples.append(SequenceSample(frames, target))
    r.require_end()
    return samples


def write_dataset(path: Union[str, Path], samples: Sequence[SequenceSample]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dataset_bytes(samples))
    logger.info("Wrote %d sequences to %s", len(samples), path)
    return path


def read_dataset(path: Union[str, Path]) -> List[SequenceSample]:
    """Read a whole LSEQ file; any defect raises FormatError and nothing is returned."""
    return parse_dataset(Path(path).read_bytes())
