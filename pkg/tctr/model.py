#!/usr/bin/env python3
"""
model.py
--------------------------------
Full detector: PFN → backbone per frame → temporal module → fusion →
up-sampling refinement → anchor head.

Temporal modules:
    tctr    encoder over the window, spatial decoder on the target frame, g fused per model.fusion
    concat  channel concatenation of the window's feature maps, 1×1 conv back to C1
    none    target frame only

Per-class anchor statistics (l, w, h, z) live in the parameter store as a
non-trainable buffer, so a checkpoint carries the anchors it was trained with.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .backbone import BackboneConfig, backbone_forward, init_backbone
from .config import RunConfig
from .errors import ConfigError
from .head import (
    AnchorGrid, DetectionSet, HeadConfig, HeadOutput, LossBreakdown, TargetAssignment,
    anchor_stats_from_boxes, assign_targets, compute_loss, decode_and_nms, head_forward,
    init_head, make_anchors,
)
from .numerics import TRAIN_DTYPE, Tensor
from .params import ParamStore, load_checkpoint, make_rng
from .pillars import (
    GridConfig, PillarSet, PointFrame, SequenceSample, init_pfn, pfn_forward, voxelize,
)
from .refine import (
    RefineConfig, frame_concat, fuse_variant, init_frame_concat, init_fusion, init_refine,
    upsample_refine,
)
from .transformer import TctrConfig, Trace, init_tctr, tctr_forward

logger = logging.getLogger(__name__)

ANCHOR_STATS = "anchors.stats"
VOXEL_STREAM = 3


@dataclass(frozen=True)
class ModelConfig:
    grid: GridConfig
    pfn_channels: int
    backbone: BackboneConfig
    tctr: TctrConfig
    frames: int
    temporal: str
    fusion: str
    refine: RefineConfig
    head: HeadConfig

    @classmethod
    def from_run_config(cls, cfg: RunConfig) -> "ModelConfig":
        return cls(cfg.grid(), cfg.get_int("pfn.channels"), cfg.backbone(), cfg.tctr(), cfg.frames(),
                   cfg.temporal(), cfg.fusion(), cfg.refine(), cfg.head())

    @property
    def uses_transformer(self) -> bool:
        return self.temporal == "tctr" and self.fusion != "x_only"

    @property
    def gated_refine(self) -> bool:
        return self.uses_transformer and self.refine.gated

    @property
    def window(self) -> int:
        return 1 if self.temporal == "none" else self.frames

    def feature_extent(self):
        d = self.backbone.downsample
        return self.grid.H0 // d, self.grid.W0 // d

    def output_extent(self):
        h1, w1 = self.feature_extent()
        return h1 * 2 ** self.refine.stages, w1 * 2 ** self.refine.stages


@dataclass
class PreparedSample:
    """Voxelized window plus fixed training targets for one sequence."""
    pillars: List[PillarSet]
    assignment: TargetAssignment


class Detector:
    def __init__(self, cfg: ModelConfig, anchor_stats: np.ndarray, seed: int = 0,
                 dtype=TRAIN_DTYPE, params: Optional[ParamStore] = None):
        self.cfg = cfg
        if params is None:
            params = self.init_params(cfg, anchor_stats, seed, dtype)
        self.params = params
        self._anchor_key: Optional[bytes] = None
        self._anchors: Optional[AnchorGrid] = None

    @staticmethod
    def init_params(cfg: ModelConfig, anchor_stats: np.ndarray, seed: int, dtype=TRAIN_DTYPE) -> ParamStore:
        stats = np.asarray(anchor_stats, dtype=np.float64).reshape(-1, 4)
        if stats.shape[0] != cfg.head.num_classes:
            raise ConfigError(f"{stats.shape[0]} anchor rows for {cfg.head.num_classes} classes")
        params = ParamStore(seed, dtype)
        params.add(ANCHOR_STATS, stats, trainable=False)
        c1 = cfg.backbone.out_channels
        h1, w1 = cfg.feature_extent()
        init_pfn(params, cfg.pfn_channels)
        init_backbone(params, cfg.backbone)
        if cfg.temporal == "concat":
            init_frame_concat(params, cfg.window, c1)
        if cfg.uses_transformer:
            init_tctr(params, cfg.tctr, c1, h1, w1)
            init_fusion(params, cfg.fusion, c1)
        init_refine(params, cfg.refine, c1, cfg.gated_refine)
        init_head(params, cfg.refine.out_channels(c1), cfg.head)
        logger.debug("Initialized %d parameter tensors (%d values)", len(params), params.num_values())
        return params

    @classmethod
    def from_checkpoint(cls, cfg: ModelConfig, path: Union[str, Path]) -> "Detector":
        det = cls(cfg, np.ones((cfg.head.num_classes, 4)))
        load_checkpoint(path, det.params)
        return det

    def with_params(self, params: ParamStore) -> "Detector":
        return Detector(self.cfg, params[ANCHOR_STATS].data, params=params)

    @property
    def anchors(self) -> AnchorGrid:
        stats = self.params[ANCHOR_STATS].data
        key = stats.tobytes()
        if key != self._anchor_key:
            h, w = self.cfg.output_extent()
            self._anchors = make_anchors(self.cfg.grid, h, w, stats, self.cfg.head.anchor_yaws)
            self._anchor_key = key
        return self._anchors

    # -------------------- Forward --------------------

    def window(self, seq: SequenceSample) -> List[PointFrame]:
        return seq.window(self.cfg.window)

    def voxelize_window(self, frames: Sequence[PointFrame], rng: np.random.Generator) -> List[PillarSet]:
        return [voxelize(f, self.cfg.grid, rng) for f in frames]

    def forward(self, pillars: Sequence[PillarSet], trace: Optional[Trace] = None) -> HeadOutput:
        cfg, params = self.cfg, self.params
        x_list: List[Tensor] = [
            backbone_forward(pfn_forward(ps, params, cfg.grid), params, cfg.backbone) for ps in pillars
        ]
        x_t = x_list[len(x_list) // 2]
        g = None
        if cfg.temporal == "concat":
            f = frame_concat(x_list, params)
        elif cfg.uses_transformer:
            g = tctr_forward(x_list, params, cfg.tctr, trace=trace)
            f = fuse_variant(x_t, g, cfg.fusion, params)
        else:
            f = x_t
        f, _ = upsample_refine(f, g if cfg.gated_refine else None, params, cfg.refine.stages)
        return head_forward(f, params, cfg.head)

    def prepare(self, seq: SequenceSample, rng: np.random.Generator) -> PreparedSample:
        pillars = self.voxelize_window(self.window(seq), rng)
        assignment = assign_targets(self.anchors, seq.target.gt_boxes, self.cfg.head.pos_iou, self.cfg.head.neg_iou)
        return PreparedSample(pillars, assignment)

    def loss(self, sample: PreparedSample) -> LossBreakdown:
        return compute_loss(self.forward(sample.pillars), sample.assignment, self.cfg.head)

    def detect(self, seq: SequenceSample, rng: Optional[np.random.Generator] = None) -> DetectionSet:
        rng = rng if rng is not None else make_rng(self.params.seed, VOXEL_STREAM)
        out = self.forward(self.voxelize_window(self.window(seq), rng))
        h = self.cfg.head
        return decode_and_nms(out.cls.data, out.reg.data, out.dir.data, self.anchors,
                              h.score_threshold, h.nms_iou, h.max_detections)


def anchor_stats_for(samples: Sequence[SequenceSample], cfg: RunConfig) -> np.ndarray:
    """Configured anchor stats, or the per-class ground-truth mean over every frame of `samples`."""
    configured = cfg["head.anchor_stats"]
    if configured is not None:
        return np.asarray(configured, dtype=np.float64).reshape(-1, 4)
    defaults = cfg.scene().class_stats()
    boxes = [f.boxes_array() for s in samples for f in s.frames]
    ids = [f.class_ids() for s in samples for f in s.frames]
    if not boxes:
        return defaults
    return anchor_stats_from_boxes(np.concatenate(boxes), np.concatenate(ids), defaults)
