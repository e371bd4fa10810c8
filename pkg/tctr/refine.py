#!/usr/bin/env python3
"""
refine.py
--------------------------------
Fusion of the transformer output g into the target frame's features and
the staged up-sampling refinement that follows it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

from .errors import ConfigError
from .numerics import Tensor, add, concat, conv2d, mul, relu, sigmoid, upsample2x_nearest
from .params import ParamStore

FUSION_MODES = ("gate", "concat", "add", "x_only", "g_only")


@dataclass(frozen=True)
class RefineConfig:
    stages: int = 2
    channels: int = 32
    gated: bool = True

    def validate(self) -> "RefineConfig":
        if self.stages < 0 or self.channels < 1:
            raise ConfigError(f"refine.stages must be >= 0 and refine.channels >= 1, got {self.stages}, {self.channels}")
        return self

    def out_channels(self, c1: int) -> int:
        return self.channels if self.stages else c1


def gate_fuse(x_t: Tensor, g: Tensor) -> Tensor:
    """F = X ⊗ σ(g)."""
    return mul(x_t, sigmoid(g))


def init_fusion(params: ParamStore, mode: str, c1: int, prefix: str = "fuse") -> None:
    if mode == "concat":
        params.add_conv(f"{prefix}.w", c1, 2 * c1, 1)
        params.add_zeros(f"{prefix}.b", (c1,))


def fuse_variant(x_t: Tensor, g: Tensor, mode: str, params: Optional[ParamStore] = None,
                 prefix: str = "fuse") -> Tensor:
    if mode == "gate":
        return gate_fuse(x_t, g)
    if mode == "add":
        return add(x_t, g)
    if mode == "x_only":
        return x_t
    if mode == "g_only":
        return g
    if mode == "concat":
        return conv2d(concat([x_t, g], axis=0), params[f"{prefix}.w"], params[f"{prefix}.b"])
    raise ConfigError(f"Unknown fusion mode '{mode}' (expected one of {', '.join(FUSION_MODES)})")


def init_frame_concat(params: ParamStore, frames: int, c1: int, prefix: str = "frame_concat") -> None:
    params.add_conv(f"{prefix}.w", c1, frames * c1, 1)
    params.add_zeros(f"{prefix}.b", (c1,))


def frame_concat(x_list: Sequence[Tensor], params: ParamStore, prefix: str = "frame_concat") -> Tensor:
    """Temporal baseline: channel concatenation of all frames, 1×1 conv back to C1."""
    stacked = x_list[0] if len(x_list) == 1 else concat(list(x_list), axis=0)
    return conv2d(stacked, params[f"{prefix}.w"], params[f"{prefix}.b"])


def init_refine(params: ParamStore, cfg: RefineConfig, c1: int, gated: bool, prefix: str = "refine") -> None:
    cin = c1
    for s in range(cfg.stages):
        params.add_conv(f"{prefix}.stage{s}.conv.w", cfg.channels, cin, 3)
        params.add_zeros(f"{prefix}.stage{s}.conv.b", (cfg.channels,))
        if gated:
            params.add_conv(f"{prefix}.stage{s}.gate.w", cfg.channels, cin, 1)
            params.add_zeros(f"{prefix}.stage{s}.gate.b", (cfg.channels,))
        cin = cfg.channels


def upsample_refine(f: Tensor, g: Optional[Tensor], params: ParamStore, stages: int,
                    prefix: str = "refine") -> Tuple[Tensor, Optional[Tensor]]:
    """Each stage doubles the extents: F ← relu(conv3x3(up(F))); g ← conv1x1(up(g)); F ← F ⊗ σ(g).

    With g None the gate is skipped. Returns the refined F and the last g.
    """
    for s in range(stages):
        name = f"{prefix}.stage{s}"
        f = relu(conv2d(upsample2x_nearest(f), params[f"{name}.conv.w"], params[f"{name}.conv.b"], pad=1))
        if g is not None:
            g = conv2d(upsample2x_nearest(g), params[f"{name}.gate.w"], params[f"{name}.gate.b"])
            f = gate_fuse(f, g)
    return f, g
