#!/usr/bin/env python3
"""
pillars.py
--------------------------------
Point-cloud frames, pillar voxelization, the Pillar Feature Network and
sequence-consistent augmentation.

A frame's points are binned into vertical columns (pillars) over a
bird's-eye-view grid. Each point is described by 9 features, passed
through a shared linear layer with ReLU, max-pooled per pillar and
scattered back onto the grid to form the C0×H0×W0 pseudo-image.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ContractError
from .numerics import (
    Tensor, constant, linear, max_over_points, mul, relu, reshape, scatter_to_grid,
)
from .params import ParamStore

logger = logging.getLogger(__name__)

PFN_FEATURES = 9


# -------------------- Frames --------------------

@dataclass
class GtBox:
    """Ground-truth box: center, size, yaw in (−π, π] and a class id."""
    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    yaw: float
    class_id: int

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.l, self.w, self.h, self.yaw], dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float], class_id: int) -> "GtBox":
        x, y, z, l, w, h, yaw = (float(v) for v in values)
        return cls(x, y, z, l, w, h, yaw, int(class_id))


@dataclass
class PointFrame:
    """One sweep: points [P×4] as (x, y, z, r) and its ground-truth boxes."""
    points: np.ndarray
    gt_boxes: List[GtBox] = field(default_factory=list)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 4)

    def boxes_array(self) -> np.ndarray:
        if not self.gt_boxes:
            return np.zeros((0, 7))
        return np.stack([b.as_array() for b in self.gt_boxes])

    def class_ids(self) -> np.ndarray:
        return np.array([b.class_id for b in self.gt_boxes], dtype=np.int64)


@dataclass
class SequenceSample:
    """Consecutive frames with a designated target frame."""
    frames: List[PointFrame]
    target_index: int

    @property
    def target(self) -> PointFrame:
        return self.frames[self.target_index]

    def window(self, n: int) -> List[PointFrame]:
        """The n = 2T+1 frames centred on the target, in temporal order."""
        if n < 1 or n % 2 == 0:
            raise ConfigError(f"Frame window must be odd and positive, got {n}")
        radius = n // 2
        lo, hi = self.target_index - radius, self.target_index + radius + 1
        if lo < 0 or hi > len(self.frames):
            raise ContractError(
                f"Sequence of {len(self.frames)} frames (target {self.target_index}) "
                f"cannot supply a window of {n}"
            )
        return self.frames[lo:hi]


def wrap_angle(a):
    """Map angles into (−π, π]."""
    r = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    r = np.where(r <= -np.pi, np.pi, r)
    return float(r) if np.ndim(r) == 0 else r


# -------------------- Grid and voxelization --------------------

@dataclass(frozen=True)
class GridConfig:
    x_range: Tuple[float, float] = (-6.4, 6.4)
    y_range: Tuple[float, float] = (-6.4, 6.4)
    z_range: Tuple[float, float] = (-5.0, 3.0)
    pillar_size: Tuple[float, float] = (0.2, 0.2)
    max_points_per_pillar: int = 20
    max_pillars: int = 4096

    @property
    def W0(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.pillar_size[0]))

    @property
    def H0(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.pillar_size[1]))

    def validate(self) -> "GridConfig":
        for axis, (lo, hi), size in (("x", self.x_range, self.pillar_size[0]),
                                     ("y", self.y_range, self.pillar_size[1])):
            if hi <= lo or size <= 0:
                raise ConfigError(f"grid {axis}_range {lo}..{hi} / pillar {size} is empty")
            cells = (hi - lo) / size
            if abs(cells - round(cells)) > 1e-6:
                raise ConfigError(f"grid {axis} extent {hi - lo} is not a whole number of {size} m pillars")
            n = int(round(cells))
            if n & (n - 1):
                raise ConfigError(f"grid {axis} cell count {n} is not a power of two")
        if self.z_range[1] <= self.z_range[0]:
            raise ConfigError(f"grid z_range {self.z_range} is empty")
        if self.max_points_per_pillar < 1 or self.max_pillars < 1:
            raise ConfigError("max_points_per_pillar and max_pillars must be at least 1")
        return self

    def cell_centers(self, rows: np.ndarray, cols: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        xc = self.x_range[0] + (cols + 0.5) * self.pillar_size[0]
        yc = self.y_range[0] + (rows + 0.5) * self.pillar_size[1]
        return xc, yc


@dataclass
class PillarSet:
    points: np.ndarray   # [P × M × 4], zero padded
    counts: np.ndarray   # [P]
    rows: np.ndarray     # [P]
    cols: np.ndarray     # [P]

    def __len__(self) -> int:
        return int(self.counts.shape[0])


def in_range_mask(points: np.ndarray, cfg: GridConfig) -> np.ndarray:
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    return ((x >= cfg.x_range[0]) & (x < cfg.x_range[1])
            & (y >= cfg.y_range[0]) & (y < cfg.y_range[1])
            & (z >= cfg.z_range[0]) & (z <= cfg.z_range[1]))


def voxelize(frame: PointFrame, cfg: GridConfig, rng: np.random.Generator) -> PillarSet:
    """Bin a frame's points into pillars.

    Out-of-range points are dropped. Pillars holding more than
    max_points_per_pillar points keep a seeded random subset (in original
    point order); grids with more than max_pillars occupied cells keep a
    seeded random subset of cells. Pillars are ordered by linear cell index.
    """
    m = cfg.max_points_per_pillar
    pts = np.asarray(frame.points, dtype=np.float32)
    pts = pts[in_range_mask(pts, cfg)]
    if pts.shape[0] == 0:
        return PillarSet(np.zeros((0, m, 4), np.float32), np.zeros(0, np.int64),
                         np.zeros(0, np.int64), np.zeros(0, np.int64))

    cols = np.floor((pts[:, 0].astype(np.float64) - cfg.x_range[0]) / cfg.pillar_size[0]).astype(np.int64)
    rows = np.floor((pts[:, 1].astype(np.float64) - cfg.y_range[0]) / cfg.pillar_size[1]).astype(np.int64)
    cols = np.clip(cols, 0, cfg.W0 - 1)
    rows = np.clip(rows, 0, cfg.H0 - 1)
    linear_idx = rows * cfg.W0 + cols

    order = np.argsort(linear_idx, kind="stable")
    cells, starts, counts = np.unique(linear_idx[order], return_index=True, return_counts=True)

    keep = np.arange(cells.shape[0])
    if cells.shape[0] > cfg.max_pillars:
        keep = np.sort(rng.choice(cells.shape[0], cfg.max_pillars, replace=False))
        logger.debug("Dropped %d pillars over the %d limit", cells.shape[0] - cfg.max_pillars, cfg.max_pillars)

    buf = np.zeros((keep.shape[0], m, 4), dtype=np.float32)
    kept_counts = np.zeros(keep.shape[0], dtype=np.int64)
    for out_i, cell_i in enumerate(keep):
        members = order[starts[cell_i]:starts[cell_i] + counts[cell_i]]
        if members.shape[0] > m:
            members = members[np.sort(rng.choice(members.shape[0], m, replace=False))]
        buf[out_i, :members.shape[0]] = pts[members]
        kept_counts[out_i] = members.shape[0]

    kept_cells = cells[keep]
    return PillarSet(buf, kept_counts, kept_cells // cfg.W0, kept_cells % cfg.W0)


# -------------------- Pillar Feature Network --------------------

def pillar_point_features(ps: PillarSet, cfg: GridConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Per-point 9-feature rows [P×M×9] and the validity mask [P×M].

    Features: x, y, z, r, offsets to the pillar's point mean, offsets to the
    pillar's cell centre in x and y. Padded slots are all zero.
    """
    p, m, _ = ps.points.shape
    pts = ps.points.astype(np.float64)
    mask = np.arange(m)[None, :] < ps.counts[:, None]
    safe = np.maximum(ps.counts, 1)[:, None]
    mean = (pts[:, :, :3] * mask[:, :, None]).sum(axis=1) / safe
    xp, yp = cfg.cell_centers(ps.rows, ps.cols)
    feats = np.zeros((p, m, PFN_FEATURES), dtype=np.float64)
    feats[:, :, :4] = pts
    feats[:, :, 4:7] = pts[:, :, :3] - mean[:, None, :]
    feats[:, :, 7] = pts[:, :, 0] - xp[:, None]
    feats[:, :, 8] = pts[:, :, 1] - yp[:, None]
    feats *= mask[:, :, None]
    return feats, mask


def init_pfn(params: ParamStore, channels: int, prefix: str = "pfn") -> None:
    params.add_linear(f"{prefix}.w", PFN_FEATURES, channels)
    params.add_zeros(f"{prefix}.b", (channels,))


def pfn_forward(ps: PillarSet, params: ParamStore, cfg: GridConfig, prefix: str = "pfn") -> Tensor:
    """Pseudo-image [C0×H0×W0]; cells without a pillar are zero."""
    w, b = params[f"{prefix}.w"], params[f"{prefix}.b"]
    c0 = w.dims[1]
    feats, mask = pillar_point_features(ps, cfg)
    p, m = mask.shape
    x = constant(feats.reshape(p * m, PFN_FEATURES), like=w)
    h = relu(linear(x, w, b))
    # padded slots must not win the max
    h = mul(h, constant(np.repeat(mask.reshape(p * m, 1), c0, axis=1), like=w))
    pooled = max_over_points(reshape(h, (p, m, c0)))
    return scatter_to_grid(pooled, ps.rows, ps.cols, cfg.H0, cfg.W0)


# -------------------- Augmentation --------------------

@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    flip_x: bool = True
    flip_y: bool = True
    rotation: Tuple[float, float] = (-0.3925, 0.3925)
    scale: Tuple[float, float] = (0.95, 1.05)


@dataclass(frozen=True)
class SequenceAugmentation:
    """One global transform: flips, then rotation about z, then uniform scale."""
    flip_x: bool = False
    flip_y: bool = False
    angle: float = 0.0
    scale: float = 1.0


def draw_augmentation(cfg: AugmentConfig, rng: np.random.Generator) -> SequenceAugmentation:
    if not cfg.enabled:
        return SequenceAugmentation()
    flips = rng.random(2)
    return SequenceAugmentation(
        flip_x=bool(cfg.flip_x and flips[0] < 0.5),
        flip_y=bool(cfg.flip_y and flips[1] < 0.5),
        angle=float(rng.uniform(*cfg.rotation)),
        scale=float(rng.uniform(*cfg.scale)),
    )


def transform_points(points: np.ndarray, aug: SequenceAugmentation) -> np.ndarray:
    out = np.array(points, dtype=np.float64).reshape(-1, 4)
    if aug.flip_x:
        out[:, 0] = -out[:, 0]
    if aug.flip_y:
        out[:, 1] = -out[:, 1]
    c, s = math.cos(aug.angle), math.sin(aug.angle)
    x, y = out[:, 0].copy(), out[:, 1].copy()
    out[:, 0] = c * x - s * y
    out[:, 1] = s * x + c * y
    out[:, :3] *= aug.scale
    return out.astype(np.float32)


def transform_box(box: GtBox, aug: SequenceAugmentation) -> GtBox:
    x, y, yaw = box.x, box.y, box.yaw
    if aug.flip_x:
        x, yaw = -x, math.pi - yaw
    if aug.flip_y:
        y, yaw = -y, -yaw
    c, s = math.cos(aug.angle), math.sin(aug.angle)
    x, y = c * x - s * y, s * x + c * y
    k = aug.scale
    return GtBox(x * k, y * k, box.z * k, box.l * k, box.w * k, box.h * k,
                 wrap_angle(yaw + aug.angle), box.class_id)


def apply_augmentation(seq: SequenceSample, aug: SequenceAugmentation) -> SequenceSample:
    frames = [PointFrame(transform_points(f.points, aug), [transform_box(b, aug) for b in f.gt_boxes])
              for f in seq.frames]
    return SequenceSample(frames, seq.target_index)


def augment_sequence(seq: SequenceSample, cfg: AugmentConfig, rng: np.random.Generator) -> SequenceSample:
    """Draw one transform and apply it to every frame's points and boxes."""
    return apply_augmentation(seq, draw_augmentation(cfg, rng))
