#!/usr/bin/env python3
"""
plots.py
--------------------------------
PNG figures written next to the text reports: precision/recall curves for
an evaluation and the loss curve of a training run. Both are skipped when
matplotlib is not installed.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional, Sequence, Union

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    HAS_MATPLOTLIB = True
except ImportError:
    HAS_MATPLOTLIB = False

logger = logging.getLogger(__name__)


def plot_pr_curves(report, path: Union[str, Path]) -> Optional[Path]:
    """One precision/recall line per (class, threshold) that has predictions."""
    if not HAS_MATPLOTLIB:
        logger.info("matplotlib not installed; skipping %s", path)
        return None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 5))
    for (c, t), r in sorted(report.results.items()):
        if r.recall.size == 0:
            continue
        ax.plot(r.recall, r.precision, "-o", markersize=2,
                label=f"{report.classes[c]} @{t:g}m (AP {r.ap:.3f})")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_title(f"mAP {report.map:.4f}")
    if ax.lines:
        ax.legend(loc="lower left", fontsize="small")
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss_curve(history: Sequence, path: Union[str, Path]) -> Optional[Path]:
    """Total loss and its three terms per step, log scale."""
    if not HAS_MATPLOTLIB or not history:
        return None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    steps = [r.step + 1 for r in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [r.total for r in history], color="black", label="total")
    for name, color in (("l_cls", "tab:blue"), ("l_loc", "tab:orange"), ("l_dir", "tab:green")):
        ax.plot(steps, [getattr(r, name) for r in history], color=color, linewidth=0.8, label=name)
    ax.set_yscale("log")
    ax.set_xlabel("Step")
    ax.set_ylabel("Loss")
    ax.legend(loc="upper right", fontsize="small")
    fig.savefig(path)
    plt.close(fig)
    return path
