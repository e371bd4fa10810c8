#!/usr/bin/env python3
"""
gradcheck.py
--------------------------------
Compare tape gradients against central finite differences in 64-bit.

For each trainable tensor a seeded sample of coordinates is perturbed by
±h and the relative error |a − n| / max(|a|, |n|, 1e-6) is recorded.
Results are grouped by the first component of the parameter name.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import RunConfig
from .model import Detector, ModelConfig, anchor_stats_for
from .numerics import CHECK_DTYPE, Tape, Tensor, backward, linear, mean_all, mul, sub, constant
from .params import ParamStore, make_rng
from .synthlidar import generate_sequence

logger = logging.getLogger(__name__)

LossFn = Callable[[ParamStore], Tensor]
GRADCHECK_STREAM = 6


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    checked: int


@dataclass
class GradcheckReport:
    checks: List[ParamCheck] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.checks), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def groups(self) -> Dict[str, Tuple[float, int]]:
        out: Dict[str, Tuple[float, int]] = {}
        for c in self.checks:
            group = c.name.split(".", 1)[0]
            err, n = out.get(group, (0.0, 0))
            out[group] = (max(err, c.max_rel_err), n + c.checked)
        return out

    def format_table(self) -> str:
        lines = [f"{'group':<14}{'max rel err':>14}{'checked':>10}"]
        for group, (err, n) in sorted(self.groups().items()):
            lines.append(f"{group:<14}{err:>14.3e}{n:>10}")
        lines.append(f"overall max rel err {self.max_rel_err:.3e} ({'PASS' if self.passed else 'FAIL'}, tolerance {self.tolerance:g})")
        return "\n".join(lines)


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-6)


def check_gradients(loss_fn: LossFn, params: ParamStore, h: float = 1e-5, samples_per_param: int = 6,
                    tolerance: float = 1e-4, seed: int = 0,
                    names: Optional[Sequence[str]] = None) -> GradcheckReport:
    """Check d(loss_fn(params))/d(param) for every trainable tensor (or `names`).

    Up to `samples_per_param` coordinates per tensor are drawn; 0 or less checks them all.
    """
    with Tape() as tape:
        loss = loss_fn(params)
    backward(loss, tape, params)
    analytic = {n: params.grad(n).copy() for n in params.names()}

    rng = make_rng(seed, GRADCHECK_STREAM)
    report = GradcheckReport(tolerance=tolerance)
    for name in (names if names is not None else params.trainable_names()):
        base = params[name].numpy()
        flat = base.reshape(-1)
        count = flat.size
        coords = np.arange(count) if samples_per_param <= 0 or count <= samples_per_param else np.sort(
            rng.choice(count, samples_per_param, replace=False))
        worst = 0.0
        for i in coords:
            plus, minus = flat.copy(), flat.copy()
            plus[i] += h
            minus[i] -= h
            params.set(name, plus.reshape(base.shape))
            lp = loss_fn(params).item()
            params.set(name, minus.reshape(base.shape))
            lm = loss_fn(params).item()
            numeric = (lp - lm) / (2.0 * h)
            worst = max(worst, relative_error(float(analytic[name].reshape(-1)[i]), numeric))
        params.set(name, base)
        report.checks.append(ParamCheck(name, worst, int(coords.size)))
    return report


def toy_linear_problem(seed: int = 0) -> Tuple[ParamStore, LossFn]:
    """Mean squared error of a single linear layer on fixed random data."""
    rng = make_rng(seed, GRADCHECK_STREAM + 1)
    params = ParamStore(seed, CHECK_DTYPE)
    params.add("toy.w", rng.standard_normal((5, 3)))
    params.add("toy.b", rng.standard_normal(3))
    x = constant(rng.standard_normal((8, 5)), dtype=CHECK_DTYPE)
    target = constant(rng.standard_normal((8, 3)), dtype=CHECK_DTYPE)

    def loss_fn(p: ParamStore) -> Tensor:
        err = sub(linear(x, p["toy.w"], p["toy.b"]), target)
        return mean_all(mul(err, err))

    return params, loss_fn


def model_problem(cfg: RunConfig) -> Tuple[ParamStore, LossFn]:
    """Full detector loss on one generated sequence, in 64-bit, without augmentation."""
    scene = cfg.scene()
    seq = generate_sequence(scene, cfg.seed)
    model_cfg = ModelConfig.from_run_config(cfg)
    detector = Detector(model_cfg, anchor_stats_for([seq], cfg), seed=cfg.seed)
    params = detector.params.astype(CHECK_DTYPE)
    # zero biases put empty grid regions exactly on ReLU kinks
    rng = make_rng(cfg.seed, GRADCHECK_STREAM + 3)
    for name in params.trainable_names():
        if name.endswith(".b") or name.endswith(".bias"):
            value = params[name].data
            params.set(name, value + rng.normal(0.0, 0.1, value.shape))
    detector = detector.with_params(params)
    sample = detector.prepare(seq, make_rng(cfg.seed, GRADCHECK_STREAM + 2))

    def loss_fn(p: ParamStore) -> Tensor:
        return detector.loss(sample).total

    return params, loss_fn


def gradcheck(cfg: RunConfig) -> GradcheckReport:
    params, loss_fn = model_problem(cfg)
    report = check_gradients(loss_fn, params, cfg.get_float("gradcheck.h"),
                             cfg.get_int("gradcheck.samples_per_param"),
                             cfg.get_float("gradcheck.tolerance"), cfg.seed)
    logger.info("Gradient check over %d tensors: max rel err %.3e", len(report.checks), report.max_rel_err)
    return report
