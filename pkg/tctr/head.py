#!/usr/bin/env python3
"""
head.py
--------------------------------
Anchor-based detection head, target assignment, the loss stack and
box decoding with non-maximum suppression.

Anchors sit at every output cell, one per class per yaw in `anchor_yaws`.
The anchor index at cell (h, w) is (h·W + w)·A + a with a = class·Y + yaw
index, matching the row order of numerics.channels_to_rows.

Box residuals, for gt g and anchor a with diagonal d = √(l_a² + w_a²):

    Δx = (x_g − x_a)/d     Δy = (y_g − y_a)/d     Δz = (z_g − z_a)/h_a
    Δl = log(l_g/l_a)      Δw = log(w_g/w_a)      Δh = log(h_g/h_a)
    Δo = sin(limit_period(o_g − o_a))             direction bit = [o_g > 0]
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ShapeError
from .numerics import (
    Tensor, add, affine, apply_op, channels_to_rows, constant, conv2d, scale,
    sigmoid, sub, take_rows,
)
from .params import ParamStore
from .pillars import GridConfig, GtBox, wrap_angle

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1
FOCAL_CLAMP = 1e-6
BOX_DIM = 7


@dataclass(frozen=True)
class HeadConfig:
    classes: Tuple[str, ...] = ("car", "pedestrian")
    anchor_yaws: Tuple[float, ...] = (0.0, math.pi / 2)
    pos_iou: float = 0.6
    neg_iou: float = 0.45
    gamma: float = 2.0
    beta_cls: float = 1.0
    beta_loc: float = 0.25
    beta_dir: float = 0.2
    score_threshold: float = 0.1
    nms_iou: float = 0.5
    max_detections: int = 100
    prior: float = 0.01

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def anchors_per_location(self) -> int:
        return len(self.classes) * len(self.anchor_yaws)

    @property
    def betas(self) -> Tuple[float, float, float]:
        return (self.beta_cls, self.beta_loc, self.beta_dir)


# -------------------- Geometry --------------------

def limit_period(val, offset: float = 0.5, period: float = math.pi):
    """Wrap into [−offset·period, (1 − offset)·period)."""
    val = np.asarray(val, dtype=np.float64)
    return val - np.floor(val / period + offset) * period


def bev_footprint(boxes: np.ndarray) -> np.ndarray:
    """Axis-aligned BEV footprints (x, y, extent_x, extent_y); l and w swap when yaw is nearer ±π/2."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, BOX_DIM)
    swap = np.abs(np.sin(boxes[:, 6])) > np.abs(np.cos(boxes[:, 6]))
    ext_x = np.where(swap, boxes[:, 4], boxes[:, 3])
    ext_y = np.where(swap, boxes[:, 3], boxes[:, 4])
    return np.stack([boxes[:, 0], boxes[:, 1], ext_x, ext_y], axis=1)


def bev_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of footprints a [n×4] and b [m×4]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax0, ax1 = a[:, 0] - a[:, 2] / 2, a[:, 0] + a[:, 2] / 2
    ay0, ay1 = a[:, 1] - a[:, 3] / 2, a[:, 1] + a[:, 3] / 2
    bx0, bx1 = b[:, 0] - b[:, 2] / 2, b[:, 0] + b[:, 2] / 2
    by0, by1 = b[:, 1] - b[:, 3] / 2, b[:, 1] + b[:, 3] / 2
    ix = np.clip(np.minimum(ax1[:, None], bx1[None, :]) - np.maximum(ax0[:, None], bx0[None, :]), 0, None)
    iy = np.clip(np.minimum(ay1[:, None], by1[None, :]) - np.maximum(ay0[:, None], by0[None, :]), 0, None)
    inter = ix * iy
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def bev_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two axis-aligned footprints given as (x, y, l, w)."""
    return float(bev_iou_matrix(np.asarray(a)[None, :], np.asarray(b)[None, :])[0, 0])


# -------------------- Anchors --------------------

@dataclass
class AnchorGrid:
    boxes: np.ndarray       # [n × 7]
    class_ids: np.ndarray   # [n]
    height: int
    width: int
    per_location: int

    def __len__(self) -> int:
        return int(self.boxes.shape[0])

    def footprints(self) -> np.ndarray:
        return bev_footprint(self.boxes)


def make_anchors(grid: GridConfig, out_h: int, out_w: int, stats: np.ndarray,
                 yaws: Sequence[float]) -> AnchorGrid:
    """Anchors over an out_h×out_w grid; stats [K×4] rows are (l, w, h, z) per class."""
    stats = np.asarray(stats, dtype=np.float64).reshape(-1, 4)
    if np.any(stats[:, :3] <= 0):
        raise ShapeError("anchor sizes must be positive", stats.shape)
    k, y = stats.shape[0], len(yaws)
    a = k * y
    cell_x = (grid.x_range[1] - grid.x_range[0]) / out_w
    cell_y = (grid.y_range[1] - grid.y_range[0]) / out_h
    hs, ws = np.meshgrid(np.arange(out_h), np.arange(out_w), indexing="ij")
    cx = grid.x_range[0] + (ws.reshape(-1) + 0.5) * cell_x
    cy = grid.y_range[0] + (hs.reshape(-1) + 0.5) * cell_y
    cls = np.repeat(np.arange(k), y)
    yaw = np.tile(np.asarray(yaws, dtype=np.float64), k)
    per_loc = np.concatenate([stats[cls][:, [3, 0, 1, 2]], yaw[:, None]], axis=1)  # z, l, w, h, yaw
    n = out_h * out_w
    boxes = np.zeros((n * a, BOX_DIM))
    boxes[:, 0] = np.repeat(cx, a)
    boxes[:, 1] = np.repeat(cy, a)
    boxes[:, 2:] = np.tile(per_loc, (n, 1))
    return AnchorGrid(boxes, np.tile(cls, n), out_h, out_w, a)


def anchor_stats_from_boxes(boxes: np.ndarray, class_ids: np.ndarray, defaults: np.ndarray) -> np.ndarray:
    """Per-class mean (l, w, h, z) of ground truth; classes without boxes keep `defaults`."""
    defaults = np.asarray(defaults, dtype=np.float64).reshape(-1, 4)
    stats = defaults.copy()
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, BOX_DIM)
    for c in range(defaults.shape[0]):
        sel = boxes[np.asarray(class_ids) == c]
        if sel.shape[0]:
            stats[c] = [sel[:, 3].mean(), sel[:, 4].mean(), sel[:, 5].mean(), sel[:, 2].mean()]
    return stats


# -------------------- Box coding --------------------

def direction_bits(yaw: np.ndarray) -> np.ndarray:
    return (wrap_angle(np.asarray(yaw, dtype=np.float64).reshape(-1)) > 0).astype(np.int64)


def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, BOX_DIM)
    an = np.asarray(anchors, dtype=np.float64).reshape(-1, BOX_DIM)
    diag = np.sqrt(an[:, 3] ** 2 + an[:, 4] ** 2)
    res = np.empty_like(gt)
    res[:, 0] = (gt[:, 0] - an[:, 0]) / diag
    res[:, 1] = (gt[:, 1] - an[:, 1]) / diag
    res[:, 2] = (gt[:, 2] - an[:, 2]) / an[:, 5]
    res[:, 3:6] = np.log(gt[:, 3:6] / an[:, 3:6])
    res[:, 6] = np.sin(limit_period(gt[:, 6] - an[:, 6]))
    return res, direction_bits(gt[:, 6])


def decode_boxes(res: np.ndarray, anchors: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Invert encode_boxes; the yaw's π ambiguity is resolved by the direction bit."""
    res = np.asarray(res, dtype=np.float64).reshape(-1, BOX_DIM)
    an = np.asarray(anchors, dtype=np.float64).reshape(-1, BOX_DIM)
    diag = np.sqrt(an[:, 3] ** 2 + an[:, 4] ** 2)
    out = np.empty_like(res)
    out[:, 0] = res[:, 0] * diag + an[:, 0]
    out[:, 1] = res[:, 1] * diag + an[:, 1]
    out[:, 2] = res[:, 2] * an[:, 5] + an[:, 2]
    out[:, 3:6] = np.exp(res[:, 3:6]) * an[:, 3:6]
    yaw = an[:, 6] + np.arcsin(np.clip(res[:, 6], -1.0, 1.0))
    base = limit_period(yaw, offset=0.0)  # [0, π)
    positive = np.where(base > 0, base, np.pi)
    negative = np.where(base > 0, base - np.pi, 0.0)
    out[:, 6] = np.where(np.asarray(dirs).reshape(-1) == 1, positive, negative)
    return out


# -------------------- Target assignment --------------------

@dataclass
class TargetAssignment:
    labels: np.ndarray        # [n] POSITIVE / NEGATIVE / IGNORE
    matched: np.ndarray       # [n] gt index for positives, −1 otherwise
    reg_targets: np.ndarray   # [n × 7], zero off positives
    dir_targets: np.ndarray   # [n]
    cls_targets: np.ndarray   # [n] class id for positives, −1 otherwise

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def n_pos(self) -> int:
        return int(np.sum(self.labels == POSITIVE))


def assign_targets(anchors: AnchorGrid, gts: Sequence[GtBox], pos_iou: float = 0.6,
                   neg_iou: float = 0.45) -> TargetAssignment:
    """Label anchors by BEV IoU with same-class ground truth.

    Positive when IoU ≥ pos_iou, negative when the best IoU < neg_iou,
    ignored otherwise. Each gt then claims its best overlapping anchor, gts
    with the highest best IoU first; an anchor claimed once is not reassigned.
    """
    n = len(anchors)
    labels = np.full(n, NEGATIVE, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    reg = np.zeros((n, BOX_DIM))
    dirs = np.zeros(n, dtype=np.int64)
    cls_t = np.full(n, -1, dtype=np.int64)
    if not gts:
        return TargetAssignment(labels, matched, reg, dirs, cls_t)

    gt_boxes = np.stack([g.as_array() for g in gts])
    gt_cls = np.array([g.class_id for g in gts], dtype=np.int64)
    iou = bev_iou_matrix(anchors.footprints(), bev_footprint(gt_boxes))
    iou = np.where(anchors.class_ids[:, None] == gt_cls[None, :], iou, 0.0)

    best_gt = np.argmax(iou, axis=1)
    best_iou = iou[np.arange(n), best_gt]
    labels[(best_iou >= neg_iou) & (best_iou < pos_iou)] = IGNORE
    pos = best_iou >= pos_iou
    labels[pos] = POSITIVE
    matched[pos] = best_gt[pos]

    forced = np.zeros(n, dtype=bool)
    for j in np.argsort(-iou.max(axis=0), kind="stable"):
        col = np.where(forced, -np.inf, iou[:, j])
        i = int(np.argmax(col))
        if col[i] > 0:
            forced[i] = True
            labels[i] = POSITIVE
            matched[i] = j

    pos_idx = np.flatnonzero(labels == POSITIVE)
    if pos_idx.size:
        reg[pos_idx], dirs[pos_idx] = encode_boxes(gt_boxes[matched[pos_idx]], anchors.boxes[pos_idx])
        cls_t[pos_idx] = gt_cls[matched[pos_idx]]
    return TargetAssignment(labels, matched, reg, dirs, cls_t)


# -------------------- Head --------------------

@dataclass
class HeadOutput:
    cls: Tensor   # [n × K] logits
    reg: Tensor   # [n × 7]
    dir: Tensor   # [n × 2] logits


def class_prior_bias(prior: float) -> float:
    return -math.log((1.0 - prior) / prior)


def init_head(params: ParamStore, cin: int, cfg: HeadConfig, prefix: str = "head") -> None:
    a, k = cfg.anchors_per_location, cfg.num_classes
    params.add_conv(f"{prefix}.cls.w", a * k, cin, 1)
    params.add_full(f"{prefix}.cls.b", (a * k,), class_prior_bias(cfg.prior))
    params.add_conv(f"{prefix}.reg.w", a * BOX_DIM, cin, 1)
    params.add_zeros(f"{prefix}.reg.b", (a * BOX_DIM,))
    params.add_conv(f"{prefix}.dir.w", a * 2, cin, 1)
    params.add_zeros(f"{prefix}.dir.b", (a * 2,))


def head_forward(f_up: Tensor, params: ParamStore, cfg: HeadConfig, prefix: str = "head") -> HeadOutput:
    """Three 1×1 conv branches, permuted to one row per anchor."""
    def branch(name: str, width: int) -> Tensor:
        out = conv2d(f_up, params[f"{prefix}.{name}.w"], params[f"{prefix}.{name}.b"])
        return channels_to_rows(out, width)

    return HeadOutput(branch("cls", cfg.num_classes), branch("reg", BOX_DIM), branch("dir", 2))


# -------------------- Losses --------------------

def focal_loss(p_t: Tensor, gamma: float, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean over unmasked rows of Σ_k −(1 − p_t)^γ·log(p_t), with p_t clamped at 1e-6."""
    p = p_t.data.astype(np.float64)
    rows = p.reshape(p.shape[0], -1)
    if mask is None:
        mask = np.ones(rows.shape[0], dtype=bool)
    count = max(int(np.sum(mask)), 1)
    weight = (np.asarray(mask, dtype=np.float64) / count).reshape((-1,) + (1,) * (p.ndim - 1))
    clamped = np.maximum(p, FOCAL_CLAMP)
    one_minus = 1.0 - p
    loss = -np.power(one_minus, gamma) * np.log(clamped)
    out = np.sum(weight * loss).astype(p_t.dtype).reshape(())

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            modulating = np.where(one_minus > 0, gamma * np.power(one_minus, gamma - 1.0), 0.0) if gamma else 0.0
            d = modulating * np.log(clamped) - np.power(one_minus, gamma) / clamped
        d = np.where(p >= FOCAL_CLAMP, d, 0.0)
        return ((g * weight * d).astype(p_t.dtype),)

    return apply_op("focal_loss", out, (p_t,), vjp)


def smooth_l1(delta: Tensor) -> Tensor:
    """Per element 0.5Δ² if |Δ| < 1 else |Δ| − 0.5, summed per row, averaged over rows."""
    d = delta.data.astype(np.float64)
    rows = max(d.shape[0], 1) if d.ndim > 1 else 1
    small = np.abs(d) < 1.0
    per = np.where(small, 0.5 * d * d, np.abs(d) - 0.5)
    out = (np.sum(per) / rows).astype(delta.dtype).reshape(())
    return apply_op("smooth_l1", out, (delta,),
                    lambda g: ((g * np.where(small, d, np.sign(d)) / rows).astype(delta.dtype),))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over rows of −log softmax(logits)[label]; zero for an empty batch."""
    z = logits.data.astype(np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    rows = z.shape[0]
    if labels.shape[0] != rows:
        raise ShapeError("one label per logit row required", logits.dims, labels.shape)
    shifted = z - (z.max(axis=1, keepdims=True) if rows else 0.0)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    onehot = np.zeros_like(z)
    onehot[np.arange(rows), labels] = 1.0
    n = max(rows, 1)
    out = (-np.sum(log_p * onehot) / n).astype(logits.dtype).reshape(())
    return apply_op("softmax_cross_entropy", out, (logits,),
                    lambda g: ((g * (np.exp(log_p) - onehot) / n).astype(logits.dtype),))


def total_loss(l_cls: Tensor, l_loc: Tensor, l_dir: Tensor, n_pos: int,
               betas: Tuple[float, float, float] = (1.0, 0.25, 0.2)) -> Tensor:
    """(β_cls·L_cls + β_loc·L_loc + β_dir·L_dir) / max(n_pos, 1)."""
    weighted = add(add(scale(l_cls, betas[0]), scale(l_loc, betas[1])), scale(l_dir, betas[2]))
    return scale(weighted, 1.0 / max(int(n_pos), 1))


@dataclass
class LossBreakdown:
    total: Tensor
    cls: float
    loc: float
    dir: float
    n_pos: int


def compute_loss(out: HeadOutput, assignment: TargetAssignment, cfg: HeadConfig) -> LossBreakdown:
    n, k = out.cls.dims
    onehot = np.zeros((n, k))
    pos = assignment.positives
    onehot[pos, assignment.cls_targets[pos]] = 1.0
    p_t = affine(sigmoid(out.cls), 2.0 * onehot - 1.0, 1.0 - onehot)
    l_cls = focal_loss(p_t, cfg.gamma, assignment.labels != IGNORE)

    reg = take_rows(out.reg, pos)
    l_loc = smooth_l1(sub(reg, constant(assignment.reg_targets[pos], like=reg)))
    l_dir = softmax_cross_entropy(take_rows(out.dir, pos), assignment.dir_targets[pos])

    total = total_loss(l_cls, l_loc, l_dir, assignment.n_pos, cfg.betas)
    return LossBreakdown(total, l_cls.item(), l_loc.item(), l_dir.item(), assignment.n_pos)


# -------------------- Decoding --------------------

@dataclass
class DetectionSet:
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, BOX_DIM)))
    class_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return int(self.scores.shape[0])

    def as_gt_boxes(self) -> List[GtBox]:
        return [GtBox.from_array(b, c) for b, c in zip(self.boxes, self.class_ids)]


def nms(footprints: np.ndarray, scores: np.ndarray, iou_thr: float) -> np.ndarray:
    """Greedy suppression in descending score order; returns kept indices."""
    order = np.argsort(-scores, kind="stable")
    keep: List[int] = []
    suppressed = np.zeros(scores.shape[0], dtype=bool)
    iou = bev_iou_matrix(footprints, footprints)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= iou[i] > iou_thr
    return np.array(keep, dtype=np.int64)


def decode_and_nms(cls_logits: np.ndarray, box_reg: np.ndarray, dir_logits: np.ndarray,
                   anchors: AnchorGrid, score_thr: float = 0.1, iou_thr: float = 0.5,
                   max_detections: int = 100) -> DetectionSet:
    cls_logits = np.asarray(cls_logits, dtype=np.float64)
    scores = 1.0 / (1.0 + np.exp(-cls_logits))
    dirs = np.argmax(np.asarray(dir_logits), axis=1)
    boxes = decode_boxes(box_reg, anchors.boxes, dirs)

    all_boxes, all_cls, all_scores = [], [], []
    for k in range(scores.shape[1]):
        cand = np.flatnonzero(scores[:, k] >= score_thr)
        if cand.size == 0:
            continue
        keep = cand[nms(bev_footprint(boxes[cand]), scores[cand, k], iou_thr)]
        all_boxes.append(boxes[keep])
        all_cls.append(np.full(keep.size, k, dtype=np.int64))
        all_scores.append(scores[keep, k])
    if not all_scores:
        return DetectionSet()
    b, c, s = np.concatenate(all_boxes), np.concatenate(all_cls), np.concatenate(all_scores)
    order = np.argsort(-s, kind="stable")[:max_detections]
    return DetectionSet(b[order], c[order], s[order])
