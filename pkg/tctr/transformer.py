#!/usr/bin/env python3
"""
transformer.py
--------------------------------
Temporal-channel encoder and spatial decoder.

The encoder treats every channel of every frame's transformed feature map
as one token (feature width H1·W1), so self-attention relates channels
across time. The decoder rebuilds the target frame voxel by voxel: its
H1·W1 query tokens attend to each other and then to the encoder memory.

Blocks are post-norm: sublayer → residual add → layer norm.

Attention weight matrices can be captured for inspection by passing a
`trace` dict; each mha call appends its per-head weights under its name.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import (
    Tensor, add, add_const, concat, conv2d, layer_norm, linear, matmul, relu,
    reshape, scale, slice_axis, softmax_rows, transpose,
)
from .params import ParamStore

VARIANTS = ("tc_encoder", "t_encoder", "c_encoder")

Trace = Dict[str, List[np.ndarray]]


@dataclass(frozen=True)
class TctrConfig:
    T: int = 1
    C2: int = 16
    C3: int = 32
    encoder_blocks: int = 2
    decoder_blocks: int = 2
    heads: int = 4
    d_k: int = 16
    ffn_hidden: int = 128
    variant: str = "tc_encoder"
    positional_encoding: bool = True

    @property
    def N(self) -> int:
        return 2 * self.T + 1

    def validate(self) -> "TctrConfig":
        if self.T < 0:
            raise ConfigError(f"tctr.T must be non-negative, got {self.T}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"Unknown encoder variant '{self.variant}' (expected one of {', '.join(VARIANTS)})")
        if self.C3 % 4:
            raise ConfigError(f"tctr.C3 must be divisible by 4 for the 2D positional embedding, got {self.C3}")
        if min(self.C2, self.heads, self.d_k, self.ffn_hidden) < 1:
            raise ConfigError("tctr widths and head counts must be positive")
        return self

    def token_count(self) -> int:
        return {"tc_encoder": self.N * self.C2, "t_encoder": self.N, "c_encoder": self.C2}[self.variant]


# -------------------- Attention --------------------

def init_mha(params: ParamStore, prefix: str, q_in: int, kv_in: int, heads: int, d_k: int, d_out: int) -> None:
    params.add_linear(f"{prefix}.wq", q_in, heads * d_k)
    params.add_linear(f"{prefix}.wk", kv_in, heads * d_k)
    params.add_linear(f"{prefix}.wv", kv_in, heads * d_k)
    params.add_linear(f"{prefix}.wo", heads * d_k, d_out)


def mha(q_in: Tensor, k_in: Tensor, v_in: Tensor, params: ParamStore, prefix: str,
        heads: int, d_k: int, trace: Optional[Trace] = None) -> Tensor:
    """Multi-head scaled dot-product attention; output has one row per query token."""
    if k_in.dims[0] != v_in.dims[0]:
        raise ShapeError("key and value token counts differ", k_in.dims, v_in.dims)
    q = matmul(q_in, params[f"{prefix}.wq"])
    k = matmul(k_in, params[f"{prefix}.wk"])
    v = matmul(v_in, params[f"{prefix}.wv"])
    inv_sqrt = 1.0 / np.sqrt(d_k)
    outputs = []
    for i in range(heads):
        lo, hi = i * d_k, (i + 1) * d_k
        qi, ki, vi = (slice_axis(t, 1, lo, hi) for t in (q, k, v))
        weights = softmax_rows(scale(matmul(qi, transpose(ki)), inv_sqrt))
        if trace is not None:
            trace.setdefault(prefix, []).append(weights.numpy())
        outputs.append(matmul(weights, vi))
    merged = outputs[0] if heads == 1 else concat(outputs, axis=1)
    return matmul(merged, params[f"{prefix}.wo"])


def init_ffn(params: ParamStore, prefix: str, d: int, hidden: int) -> None:
    params.add_linear(f"{prefix}.w1", d, hidden)
    params.add_zeros(f"{prefix}.b1", (hidden,))
    params.add_linear(f"{prefix}.w2", hidden, d)
    params.add_zeros(f"{prefix}.b2", (d,))


def ffn(x: Tensor, params: ParamStore, prefix: str) -> Tensor:
    h = relu(linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def init_norm(params: ParamStore, prefix: str, d: int) -> None:
    params.add_full(f"{prefix}.gain", (d,), 1.0)
    params.add_zeros(f"{prefix}.bias", (d,))


def norm(x: Tensor, params: ParamStore, prefix: str) -> Tensor:
    return layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


# -------------------- Positional encodings --------------------

def positional_encoding(tokens: int, d: int) -> np.ndarray:
    """Sinusoidal table [tokens×d]: sin on even columns, cos on odd."""
    if d % 2:
        raise ShapeError("positional encoding width must be even", [tokens, d])
    pos = np.arange(tokens, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d)
    pe = np.zeros((tokens, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def positional_encoding_2d(height: int, width: int, d: int) -> np.ndarray:
    """Table [(H·W)×d]: first half encodes the row, second half the column (row-major tokens)."""
    half = d // 2
    rows = positional_encoding(height, half)
    cols = positional_encoding(width, half)
    grid_r = np.repeat(rows, width, axis=0)
    grid_c = np.tile(cols, (height, 1))
    return np.concatenate([grid_r, grid_c], axis=1)


# -------------------- Encoder --------------------

def init_encoder(params: ParamStore, cfg: TctrConfig, c1: int, h1: int, w1: int, prefix: str = "tctr.enc") -> None:
    d = h1 * w1
    params.add_conv(f"{prefix}.proj.w", cfg.C2, c1, 1)
    params.add_zeros(f"{prefix}.proj.b", (cfg.C2,))
    if cfg.variant == "t_encoder":
        params.add_linear(f"{prefix}.frame_proj.w", cfg.C2 * d, d)
        params.add_zeros(f"{prefix}.frame_proj.b", (d,))
    for m in range(cfg.encoder_blocks):
        block = f"{prefix}.block{m}"
        init_mha(params, f"{block}.attn", d, d, cfg.heads, cfg.d_k, d)
        init_norm(params, f"{block}.norm1", d)
        init_ffn(params, f"{block}.ffn", d, cfg.ffn_hidden)
        init_norm(params, f"{block}.norm2", d)


def _check_frames(x_list: Sequence[Tensor]) -> None:
    if not x_list:
        raise ShapeError("no frames given", [0])
    for x in x_list[1:]:
        if x.dims != x_list[0].dims:
            raise ShapeError("frames disagree in feature-map extents", x_list[0].dims, x.dims)


def _project_frame(x: Tensor, params: ParamStore, prefix: str) -> Tensor:
    """X [C1×H1×W1] → X′ flattened per channel [C2×(H1·W1)]."""
    xp = conv2d(x, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"])
    c2, h, w = xp.dims
    return reshape(xp, (c2, h * w))


def tokenize_channels(x_list: Sequence[Tensor], params: ParamStore, prefix: str = "tctr.enc") -> Tensor:
    """Z [(N·C2)×(H1·W1)] with token index frame·C2 + channel."""
    _check_frames(x_list)
    tokens = [_project_frame(x, params, prefix) for x in x_list]
    return tokens[0] if len(tokens) == 1 else concat(tokens, axis=0)


def encoder_stack(z: Tensor, params: ParamStore, cfg: TctrConfig, prefix: str = "tctr.enc",
                  trace: Optional[Trace] = None) -> Tensor:
    if cfg.positional_encoding:
        z = add_const(z, positional_encoding(*z.dims))
    for m in range(cfg.encoder_blocks):
        block = f"{prefix}.block{m}"
        z = norm(add(z, mha(z, z, z, params, f"{block}.attn", cfg.heads, cfg.d_k, trace)), params, f"{block}.norm1")
        z = norm(add(z, ffn(z, params, f"{block}.ffn")), params, f"{block}.norm2")
    return z


def encode_tc(x_list: Sequence[Tensor], params: ParamStore, cfg: TctrConfig, prefix: str = "tctr.enc",
              trace: Optional[Trace] = None) -> Tensor:
    """Encoder memory Z^en over all channel tokens of all frames."""
    return encoder_stack(tokenize_channels(x_list, params, prefix), params, cfg, prefix, trace)


def encode_variant(x_list: Sequence[Tensor], params: ParamStore, cfg: TctrConfig, prefix: str = "tctr.enc",
                   trace: Optional[Trace] = None) -> Tensor:
    """Encoder memory for the configured variant.

    t_encoder: one token per frame (whole X′ flattened, projected to H1·W1).
    c_encoder: the C2 channel tokens of the target (middle) frame only.
    """
    if cfg.variant == "tc_encoder":
        return encode_tc(x_list, params, cfg, prefix, trace)
    _check_frames(x_list)
    if cfg.variant == "t_encoder":
        rows = []
        for x in x_list:
            xp = _project_frame(x, params, prefix)
            rows.append(reshape(xp, (1, xp.size)))
        frames = rows[0] if len(rows) == 1 else concat(rows, axis=0)
        z = linear(frames, params[f"{prefix}.frame_proj.w"], params[f"{prefix}.frame_proj.b"])
        return encoder_stack(z, params, cfg, prefix, trace)
    if cfg.variant == "c_encoder":
        target = x_list[len(x_list) // 2]
        return encoder_stack(_project_frame(target, params, prefix), params, cfg, prefix, trace)
    raise ConfigError(f"Unknown encoder variant '{cfg.variant}'")


# -------------------- Decoder --------------------

def init_decoder(params: ParamStore, cfg: TctrConfig, c1: int, h1: int, w1: int, prefix: str = "tctr.dec") -> None:
    mem_width = h1 * w1
    params.add_conv(f"{prefix}.in.w", cfg.C3, c1, 1)
    params.add_zeros(f"{prefix}.in.b", (cfg.C3,))
    for m in range(cfg.decoder_blocks):
        block = f"{prefix}.block{m}"
        init_mha(params, f"{block}.self", cfg.C3, cfg.C3, cfg.heads, cfg.d_k, cfg.C3)
        init_norm(params, f"{block}.norm1", cfg.C3)
        init_mha(params, f"{block}.cross", cfg.C3, mem_width, cfg.heads, cfg.d_k, cfg.C3)
        init_norm(params, f"{block}.norm2", cfg.C3)
        init_ffn(params, f"{block}.ffn", cfg.C3, cfg.ffn_hidden)
        init_norm(params, f"{block}.norm3", cfg.C3)
    params.add_conv(f"{prefix}.out.w", c1, cfg.C3, 1)
    params.add_zeros(f"{prefix}.out.b", (c1,))


def decode_spatial(x_t: Tensor, mem: Tensor, params: ParamStore, cfg: TctrConfig, prefix: str = "tctr.dec",
                   trace: Optional[Trace] = None) -> Tensor:
    """g [C1×H1×W1] from the target frame's voxels attending to the encoder memory."""
    c1, h1, w1 = x_t.dims
    if mem.dims[1] != h1 * w1:
        raise ShapeError("encoder memory width must equal the voxel count H1·W1", mem.dims, x_t.dims)
    s = conv2d(x_t, params[f"{prefix}.in.w"], params[f"{prefix}.in.b"])
    s = transpose(reshape(s, (cfg.C3, h1 * w1)))
    s = add_const(s, positional_encoding_2d(h1, w1, cfg.C3))
    for m in range(cfg.decoder_blocks):
        block = f"{prefix}.block{m}"
        s = norm(add(s, mha(s, s, s, params, f"{block}.self", cfg.heads, cfg.d_k, trace)), params, f"{block}.norm1")
        s = norm(add(s, mha(s, mem, mem, params, f"{block}.cross", cfg.heads, cfg.d_k, trace)), params, f"{block}.norm2")
        s = norm(add(s, ffn(s, params, f"{block}.ffn")), params, f"{block}.norm3")
    s = reshape(transpose(s), (cfg.C3, h1, w1))
    return conv2d(s, params[f"{prefix}.out.w"], params[f"{prefix}.out.b"])


def init_tctr(params: ParamStore, cfg: TctrConfig, c1: int, h1: int, w1: int, prefix: str = "tctr") -> None:
    init_encoder(params, cfg, c1, h1, w1, f"{prefix}.enc")
    init_decoder(params, cfg, c1, h1, w1, f"{prefix}.dec")


def tctr_forward(x_list: Sequence[Tensor], params: ParamStore, cfg: TctrConfig, prefix: str = "tctr",
                 trace: Optional[Trace] = None) -> Tensor:
    """Encoder over the window, decoder on the middle frame; returns g."""
    mem = encode_variant(x_list, params, cfg, f"{prefix}.enc", trace)
    return decode_spatial(x_list[len(x_list) // 2], mem, params, cfg, f"{prefix}.dec", trace)
