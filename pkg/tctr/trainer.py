#!/usr/bin/env python3
"""
trainer.py
--------------------------------
Training loop: Adam under a one-cycle learning-rate schedule.

Each step draws `train.batch_size` sequences (epoch-wise shuffled),
augments each with one transform per sequence, and minimises the batch
mean of the detection loss. A non-finite value anywhere in the forward or
backward pass aborts with TrainingDiverged.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import RunConfig
from .errors import NonFiniteError, TrainingDiverged
from .model import Detector, ModelConfig, anchor_stats_for
from .numerics import Tape, add, backward, scale
from .params import Adam, make_rng, save_checkpoint
from .pillars import SequenceSample, augment_sequence
from .plots import plot_loss_curve
from .runlog import RunLog

logger = logging.getLogger(__name__)

BATCH_STREAM = 2
AUGMENT_STREAM = 4
VOXEL_STREAM = 5


def one_cycle_lr(step: int, total: int, lr_max: float, warmup_fraction: float = 0.3,
                 initial_div: float = 10.0, final_div: float = 100.0) -> float:
    """Cosine warm-up from lr/initial_div to lr, then cosine decay to lr/final_div.

    `step` runs over 0..total-1; the peak falls at warmup_fraction of the way.
    """
    start, floor = lr_max / initial_div, lr_max / final_div
    if total <= 1:
        return start
    p = step / (total - 1)
    if p <= warmup_fraction and warmup_fraction > 0:
        return start + (lr_max - start) * (1.0 - math.cos(math.pi * p / warmup_fraction)) / 2.0
    q = (p - warmup_fraction) / (1.0 - warmup_fraction)
    return floor + (lr_max - floor) * (1.0 + math.cos(math.pi * q)) / 2.0


@dataclass
class StepRecord:
    step: int
    lr: float
    l_cls: float
    l_loc: float
    l_dir: float
    total: float
    grad_norm: float


@dataclass
class TrainResult:
    detector: Detector
    history: List[StepRecord] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    wall_seconds: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.history[-1].total if self.history else float("nan")


class BatchSampler:
    """Epoch-wise shuffled indices from a seeded stream."""

    def __init__(self, count: int, rng: np.random.Generator):
        self.count = count
        self.rng = rng
        self._order: List[int] = []

    def take(self, n: int) -> List[int]:
        out = []
        while len(out) < n:
            if not self._order:
                self._order = list(self.rng.permutation(self.count))
            out.append(int(self._order.pop(0)))
        return out


def train(cfg: RunConfig, samples: Sequence[SequenceSample], out_dir: Optional[Path] = None,
          runlog: Optional[RunLog] = None) -> TrainResult:
    """Train a fresh detector on `samples`; writes a checkpoint when out_dir is given."""
    started = time.perf_counter()
    model_cfg = ModelConfig.from_run_config(cfg)
    detector = Detector(model_cfg, anchor_stats_for(samples, cfg), seed=cfg.seed)
    params = detector.params
    steps = cfg.get_int("train.steps")
    batch = cfg.get_int("train.batch_size")
    lr_max = cfg.get_float("train.lr")
    log_every = max(cfg.get_int("train.log_every"), 1)
    augment_cfg = cfg.augment()
    optimizer = Adam(params, lr_max)
    sampler = BatchSampler(len(samples), make_rng(cfg.seed, BATCH_STREAM))
    aug_rng = make_rng(cfg.seed, AUGMENT_STREAM)
    vox_rng = make_rng(cfg.seed, VOXEL_STREAM)
    result = TrainResult(detector)
    last: Dict[str, float] = {}

    for step in range(steps):
        lr = one_cycle_lr(step, steps, lr_max, cfg.get_float("train.warmup_fraction"),
                          cfg.get_float("train.initial_div"), cfg.get_float("train.final_div"))
        idx = sampler.take(batch)
        try:
            with Tape() as tape:
                parts = []
                for i in idx:
                    seq = augment_sequence(samples[i], augment_cfg, aug_rng)
                    parts.append(detector.loss(detector.prepare(seq, vox_rng)))
                total = parts[0].total
                for p in parts[1:]:
                    total = add(total, p.total)
                total = scale(total, 1.0 / len(parts))
            backward(total, tape, params)
            grads_finite = all(np.all(np.isfinite(params.grad(n))) for n in params.trainable_names())
            if not grads_finite:
                raise NonFiniteError("backward")
        except NonFiniteError as exc:
            raise TrainingDiverged(step, last, exc.op) from exc

        record = StepRecord(step, lr,
                            float(np.mean([p.cls for p in parts])),
                            float(np.mean([p.loc for p in parts])),
                            float(np.mean([p.dir for p in parts])),
                            total.item(), params.grad_norm())
        if not math.isfinite(record.total):
            raise TrainingDiverged(step, last)
        optimizer.step(lr)
        result.history.append(record)
        last = {"l_cls": record.l_cls, "l_loc": record.l_loc, "l_dir": record.l_dir, "total": record.total}
        if runlog is not None:
            runlog.record("step", step=step, lr=lr, l_cls=record.l_cls, l_loc=record.l_loc,
                          l_dir=record.l_dir, total=record.total, grad_norm=record.grad_norm)
        if step % log_every == 0 or step == steps - 1:
            logger.info("step %d/%d lr=%.6f loss=%.5f grad_norm=%.4f", step + 1, steps, lr, record.total,
                        record.grad_norm)

    if out_dir is not None:
        result.checkpoint = save_checkpoint(Path(out_dir) / cfg["data.checkpoint"], params)
        plot_loss_curve(result.history, Path(out_dir) / "loss_curve.png")
    result.wall_seconds = time.perf_counter() - started
    return result
