#!/usr/bin/env python3
"""
ablation.py
--------------------------------
Train and evaluate model variants along one axis under identical seeds
and budget, and tabulate mAP and per-class AP.

Axes:
    framework  baseline / baseline+concat / baseline+TCTR / baseline+TCTR+FRM
    encoder    t_encoder / c_encoder / tc_encoder
    fusion     x_only / concat / add / gate
    frames     one row per window length in ablate.frames
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import RunConfig
from .errors import ConfigError
from .evaluation import evaluate_detector
from .pillars import SequenceSample
from .runlog import RunLog
from .trainer import train

try:
    from openpyxl import Workbook
    from openpyxl.styles import Font
    from openpyxl.utils import get_column_letter
    HAS_OPENPYXL = True
except ImportError:
    HAS_OPENPYXL = False

logger = logging.getLogger(__name__)

Variant = Tuple[str, Dict[str, Any]]


def axis_variants(axis: str, cfg: RunConfig) -> List[Variant]:
    """(row name, config overrides) for every row of an axis, in table order."""
    if axis == "framework":
        return [
            ("baseline", {"model.frames": 1, "model.temporal": "none"}),
            ("baseline+concat", {"model.temporal": "concat"}),
            ("baseline+TCTR", {"model.temporal": "tctr", "model.fusion": "g_only", "refine.gated": False}),
            ("baseline+TCTR+FRM", {"model.temporal": "tctr", "model.fusion": "gate", "refine.gated": True}),
        ]
    if axis == "encoder":
        return [(v, {"model.temporal": "tctr", "tctr.variant": v}) for v in ("t_encoder", "c_encoder", "tc_encoder")]
    if axis == "fusion":
        return [(m, {"model.temporal": "tctr", "model.fusion": m}) for m in ("x_only", "concat", "add", "gate")]
    if axis == "frames":
        return [(f"N={int(n)}", {"model.frames": int(n)}) for n in cfg["ablate.frames"]]
    raise ConfigError(f"Unknown ablation axis '{axis}'")


@dataclass
class AblationRow:
    variant: str
    map: float
    per_class_ap: Dict[str, float]
    seed_maps: List[float] = field(default_factory=list)


@dataclass
class AblationTable:
    axis: str
    classes: Tuple[str, ...]
    rows: List[AblationRow] = field(default_factory=list)

    def row(self, variant: str) -> AblationRow:
        for r in self.rows:
            if r.variant == variant:
                return r
        raise KeyError(variant)

    def monotonicity(self) -> Optional[str]:
        """For the frames axis: whether mAP is non-decreasing in N, with per-step deltas."""
        if self.axis != "frames" or len(self.rows) < 2:
            return None
        deltas = [b.map - a.map for a, b in zip(self.rows, self.rows[1:])]
        steps = ", ".join(f"{a.variant}->{b.variant}: {d:+.4f}" for a, b, d in zip(self.rows, self.rows[1:], deltas))
        verdict = "yes" if all(d >= 0 for d in deltas) else "no"
        return f"non-decreasing: {verdict} ({steps})"

    def format_table(self) -> str:
        width = max([len("variant")] + [len(r.variant) for r in self.rows]) + 2
        header = f"{'variant':<{width}}{'mAP':>9}" + "".join(f"{c:>14}" for c in self.classes)
        lines = [f"Ablation: {self.axis}", header, "-" * len(header)]
        for r in self.rows:
            lines.append(f"{r.variant:<{width}}{r.map:>9.4f}" + "".join(f"{r.per_class_ap[c]:>14.4f}" for c in self.classes))
        mono = self.monotonicity()
        if mono:
            lines.append(mono)
        return "\n".join(lines)


def run_ablation(cfg: RunConfig, axis: str, train_samples: Sequence[SequenceSample],
                 eval_samples: Sequence[SequenceSample], runlog: Optional[RunLog] = None) -> AblationTable:
    seeds = [int(s) for s in cfg["ablate.seeds"]]
    if not seeds:
        raise ConfigError("ablate.seeds is empty")
    classes = tuple(str(c) for c in cfg["head.classes"])
    table = AblationTable(axis, classes)
    thresholds = cfg.eval_thresholds()
    for name, overrides in axis_variants(axis, cfg):
        maps: List[float] = []
        per_class: Dict[str, List[float]] = {c: [] for c in classes}
        for seed in seeds:
            variant_cfg = cfg.with_overrides({**overrides, "seed": seed})
            result = train(variant_cfg, train_samples)
            report, _ = evaluate_detector(result.detector, eval_samples, thresholds)
            maps.append(report.map)
            for c, ap in report.per_class_ap().items():
                per_class[c].append(ap)
            logger.info("%s/%s seed %d: mAP %.4f", axis, name, seed, report.map)
        row = AblationRow(name, float(np.mean(maps)), {c: float(np.mean(v)) for c, v in per_class.items()}, maps)
        table.rows.append(row)
        if runlog is not None:
            runlog.record("ablate", axis=axis, variant=name, map=row.map,
                          **{f"ap.{c}": ap for c, ap in row.per_class_ap.items()})
    return table


def write_table(table: AblationTable, out_dir: Path, include_excel: bool = True) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    txt = out_dir / f"ablation_{table.axis}.txt"
    txt.write_text(table.format_table() + "\n")
    if include_excel and HAS_OPENPYXL:
        wb = Workbook()
        ws = wb.active
        ws.title = table.axis
        ws.append(["variant", "mAP"] + list(table.classes))
        for cell in ws[1]:
            cell.font = Font(bold=True)
        for r in table.rows:
            ws.append([r.variant, round(r.map, 6)] + [round(r.per_class_ap[c], 6) for c in table.classes])
        for col in range(1, len(table.classes) + 3):
            ws.column_dimensions[get_column_letter(col)].width = 18
        wb.save(out_dir / f"ablation_{table.axis}.xlsx")
    return txt
