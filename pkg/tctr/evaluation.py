#!/usr/bin/env python3
"""
evaluation.py
--------------------------------
Center-distance average precision.

Predictions of one class are visited in descending score order; each is
matched to the nearest still-unmatched ground truth of that class in the
same frame whose BEV center lies within the threshold distance. AP is the
101-point interpolated area under the resulting precision/recall curve.
mAP averages over classes that have ground truth and over thresholds.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from .config import RunConfig
from .head import DetectionSet
from .model import Detector, ModelConfig
from .pillars import GtBox, SequenceSample
from .plots import plot_pr_curves

try:
    from openpyxl import Workbook
    from openpyxl.styles import Font
    HAS_OPENPYXL = True
except ImportError:
    HAS_OPENPYXL = False

logger = logging.getLogger(__name__)

RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class ClassResult:
    ap: float
    tp: int
    fp: int
    fn: int
    precision: np.ndarray = field(default_factory=lambda: np.zeros(0))
    recall: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class EvalReport:
    classes: Tuple[str, ...]
    thresholds: Tuple[float, ...]
    results: Dict[Tuple[int, float], ClassResult]
    gt_counts: Dict[int, int]
    map: float
    runtime: float = 0.0

    def ap(self, class_id: int, threshold: float) -> float:
        return self.results[(class_id, threshold)].ap

    def per_class_ap(self) -> Dict[str, float]:
        """AP per class averaged over thresholds."""
        return {name: float(np.mean([self.ap(c, t) for t in self.thresholds]))
                for c, name in enumerate(self.classes)}

    def format_table(self) -> str:
        header = f"{'class':<14}" + "".join(f"{'AP@' + format(t, 'g') + 'm':>10}" for t in self.thresholds)
        header += f"{'TP':>6}{'FP':>6}{'FN':>6}"
        lines = [header, "-" * len(header)]
        last = self.thresholds[-1]
        for c, name in enumerate(self.classes):
            row = f"{name:<14}" + "".join(f"{self.ap(c, t):>10.4f}" for t in self.thresholds)
            r = self.results[(c, last)]
            lines.append(row + f"{r.tp:>6}{r.fp:>6}{r.fn:>6}")
        lines.append(f"mAP: {self.map:.4f}")
        return "\n".join(lines)


def interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    """Mean over 101 recall points of the best precision at recall ≥ that point (0 if unreached)."""
    if precision.size == 0:
        return 0.0
    total = 0.0
    for r in RECALL_POINTS:
        reached = precision[recall >= r - 1e-12]
        total += float(reached.max()) if reached.size else 0.0
    return total / RECALL_POINTS.size


def match_class(dets: Sequence[DetectionSet], gts: Sequence[Sequence[GtBox]], class_id: int,
                threshold: float) -> ClassResult:
    preds = []  # (score, frame, x, y)
    for f, d in enumerate(dets):
        for box, c, s in zip(d.boxes, d.class_ids, d.scores):
            if int(c) == class_id:
                preds.append((float(s), f, float(box[0]), float(box[1])))
    gt_xy = [np.array([[g.x, g.y] for g in frame if g.class_id == class_id]).reshape(-1, 2) for frame in gts]
    n_gt = sum(a.shape[0] for a in gt_xy)
    used = [np.zeros(a.shape[0], dtype=bool) for a in gt_xy]

    order = sorted(range(len(preds)), key=lambda i: -preds[i][0])
    hits = np.zeros(len(preds), dtype=bool)
    for rank, i in enumerate(order):
        _, f, x, y = preds[i]
        cand = gt_xy[f]
        if cand.shape[0] == 0:
            continue
        dist = np.hypot(cand[:, 0] - x, cand[:, 1] - y)
        dist[used[f]] = np.inf
        j = int(np.argmin(dist))
        if dist[j] <= threshold:
            used[f][j] = True
            hits[rank] = True

    tp_cum = np.cumsum(hits)
    fp_cum = np.cumsum(~hits)
    tp = int(tp_cum[-1]) if hits.size else 0
    fp = int(fp_cum[-1]) if hits.size else 0
    if n_gt == 0 or hits.size == 0:
        return ClassResult(0.0, tp, fp, n_gt - tp)
    precision = tp_cum / np.arange(1, hits.size + 1)
    recall = tp_cum / n_gt
    return ClassResult(interpolated_ap(precision, recall), tp, fp, n_gt - tp, precision, recall)


def evaluate_detections(dets: Sequence[DetectionSet], gts: Sequence[Sequence[GtBox]],
                        classes: Sequence[str], thresholds: Sequence[float] = (0.5, 1.0)) -> EvalReport:
    """Score per-frame detections against per-frame ground truth."""
    thresholds = tuple(float(t) for t in thresholds)
    results: Dict[Tuple[int, float], ClassResult] = {}
    gt_counts = {c: sum(1 for frame in gts for g in frame if g.class_id == c) for c in range(len(classes))}
    for c in range(len(classes)):
        for t in thresholds:
            results[(c, t)] = match_class(dets, gts, c, t)
    scored = [results[(c, t)].ap for c in range(len(classes)) if gt_counts[c] for t in thresholds]
    m = float(np.mean(scored)) if scored else 0.0
    return EvalReport(tuple(classes), thresholds, results, gt_counts, m)


def evaluate_detector(detector: Detector, samples: Sequence[SequenceSample],
                      thresholds: Sequence[float]) -> Tuple[EvalReport, List[DetectionSet]]:
    started = time.perf_counter()
    dets = [detector.detect(seq) for seq in samples]
    report = evaluate_detections(dets, [seq.target.gt_boxes for seq in samples],
                                 detector.cfg.head.classes, thresholds)
    report.runtime = time.perf_counter() - started
    logger.info("Evaluated %d sequences: mAP %.4f", len(samples), report.map)
    return report, dets


def evaluate(checkpoint: Union[str, Path], samples: Sequence[SequenceSample], cfg: RunConfig) -> EvalReport:
    """Load a checkpoint against the configured model and evaluate it on `samples`."""
    detector = Detector.from_checkpoint(ModelConfig.from_run_config(cfg), checkpoint)
    report, _ = evaluate_detector(detector, samples, cfg.eval_thresholds())
    return report


def write_report(report: EvalReport, out_dir: Path, include_excel: bool = True) -> Path:
    """Write eval_report.txt, plus eval_report.xlsx and pr_curve.png when openpyxl and matplotlib are available."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    txt = out_dir / "eval_report.txt"
    txt.write_text(report.format_table() + "\n")
    if include_excel and HAS_OPENPYXL:
        wb = Workbook()
        ws = wb.active
        ws.title = "AP"
        header = ["class", "threshold", "AP", "TP", "FP", "FN"]
        ws.append(header)
        for cell in ws[1]:
            cell.font = Font(bold=True)
        for (c, t), r in sorted(report.results.items()):
            ws.append([report.classes[c], t, round(r.ap, 6), r.tp, r.fp, r.fn])
        ws.append([])
        ws.append(["mAP", None, round(report.map, 6)])
        wb.save(out_dir / "eval_report.xlsx")
    plot_pr_curves(report, out_dir / "pr_curve.png")
    return txt
