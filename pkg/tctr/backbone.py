#!/usr/bin/env python3
"""
backbone.py
--------------------------------
Shared 2D CNN mapping each frame's pseudo-image to the feature map X.

Two 3×3 stem convolutions, then residual blocks of two 3×3 convolutions
with an additive skip (1×1 projected when the width changes). Blocks
flagged in `pool_after` are followed by a 2×2 max-pool. The last two
stages are merged top-down: the second-to-last block's pre-pool output is
1×1 projected to C1 and added to the 2× up-sampled last block (projected
to C1 if needed), then pooled back to the final resolution.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

from .errors import ConfigError, ShapeError
from .numerics import Tensor, add, conv2d, maxpool2d, relu, upsample2x_nearest
from .params import ParamStore


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 32
    stem_channels: int = 32
    block_channels: Tuple[int, ...] = (32, 64, 64, 64)
    pool_after: Tuple[bool, ...] = (True, True, True, False)
    out_channels: int = 64

    @property
    def downsample(self) -> int:
        return 2 ** sum(bool(p) for p in self.pool_after)

    def validate(self, h0: int, w0: int) -> "BackboneConfig":
        if len(self.block_channels) < 2 or len(self.block_channels) != len(self.pool_after):
            raise ConfigError("backbone needs at least two blocks and one pool flag per block")
        if self.pool_after[-1]:
            raise ConfigError("the last backbone block feeds the top-down merge and cannot be pooled")
        d = self.downsample
        if h0 % d or w0 % d:
            raise ConfigError(f"grid {h0}×{w0} is not divisible by the backbone downsample {d}")
        return self


def _conv(params: ParamStore, name: str, cout: int, cin: int, k: int, bias: bool = True) -> None:
    params.add_conv(f"{name}.w", cout, cin, k)
    if bias:
        params.add_zeros(f"{name}.b", (cout,))


def init_backbone(params: ParamStore, cfg: BackboneConfig, prefix: str = "backbone") -> None:
    _conv(params, f"{prefix}.stem0", cfg.stem_channels, cfg.in_channels, 3)
    _conv(params, f"{prefix}.stem1", cfg.stem_channels, cfg.stem_channels, 3)
    cin = cfg.stem_channels
    for i, cout in enumerate(cfg.block_channels):
        _conv(params, f"{prefix}.block{i}.conv1", cout, cin, 3)
        _conv(params, f"{prefix}.block{i}.conv2", cout, cout, 3)
        if cin != cout:
            _conv(params, f"{prefix}.block{i}.skip", cout, cin, 1, bias=False)
        cin = cout
    _conv(params, f"{prefix}.lateral", cfg.out_channels, cfg.block_channels[-2], 1)
    if cfg.block_channels[-1] != cfg.out_channels:
        _conv(params, f"{prefix}.top", cfg.out_channels, cfg.block_channels[-1], 1)


def _apply(x: Tensor, params: ParamStore, name: str, pad: int = 0) -> Tensor:
    b = params[f"{name}.b"] if f"{name}.b" in params else None
    return conv2d(x, params[f"{name}.w"], b, stride=1, pad=pad)


def residual_block(x: Tensor, params: ParamStore, name: str) -> Tensor:
    h = relu(_apply(x, params, f"{name}.conv1", pad=1))
    h = _apply(h, params, f"{name}.conv2", pad=1)
    skip = _apply(x, params, f"{name}.skip") if f"{name}.skip.w" in params else x
    return relu(add(h, skip))


def backbone_forward(p: Tensor, params: ParamStore, cfg: BackboneConfig, prefix: str = "backbone") -> Tensor:
    """Pseudo-image [C0×H0×W0] → X [C1×H0/D×W0/D]."""
    if p.dims[0] != cfg.in_channels:
        raise ShapeError("pseudo-image channels do not match the backbone", p.dims, [cfg.in_channels])
    x = relu(_apply(p, params, f"{prefix}.stem0", pad=1))
    x = relu(_apply(x, params, f"{prefix}.stem1", pad=1))
    last = len(cfg.block_channels) - 1
    lateral_src = x
    for i in range(len(cfg.block_channels)):
        x = residual_block(x, params, f"{prefix}.block{i}")
        if i == last - 1:
            lateral_src = x
        if cfg.pool_after[i]:
            x = maxpool2d(x, 2, 2)

    lateral = _apply(lateral_src, params, f"{prefix}.lateral")
    top = _apply(x, params, f"{prefix}.top") if f"{prefix}.top.w" in params else x
    if cfg.pool_after[last - 1]:
        merged = add(lateral, upsample2x_nearest(top))
        return maxpool2d(merged, 2, 2)
    return add(lateral, top)
