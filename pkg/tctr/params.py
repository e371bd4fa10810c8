#!/usr/bin/env python3
"""
params.py
--------------------------------
Named trainable parameters, initializers, the Adam optimizer and the
TCKP checkpoint format.

Checkpoint layout (little-endian):

    "TCKP" | version u32 | entry count u32
    per entry: name length u32 | UTF-8 name | ndim u32 | dims u32 each | float32 data
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .binio import ByteReader, ByteWriter, dims_tuple
from .errors import CheckpointLoadError, ContractError, ShapeError
from .numerics import TRAIN_DTYPE, Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TCKP"
CHECKPOINT_VERSION = 1

LINEAR_INIT_STD = 0.02


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Seeded generator; extra integers select an independent derived stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


class ParamStore:
    """Named parameters with matching gradient slots.

    Iteration order is sorted by name. Initialization draws come from the
    store's own seeded generator, in registration order.
    """

    def __init__(self, seed: int = 0, dtype=TRAIN_DTYPE):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.rng = make_rng(seed, 0)
        self._params: Dict[str, Tensor] = {}
        self._grads: Dict[str, np.ndarray] = {}
        self._buffers: set = set()

    # -------------------- Registration --------------------

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        """Register a value. Buffers (trainable=False) are checkpointed but never updated."""
        if name in self._params:
            raise ContractError(f"Duplicate parameter name '{name}'")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=trainable)
        self._params[name] = t
        self._grads[name] = np.zeros(t.dims, dtype=self.dtype)
        if not trainable:
            self._buffers.add(name)
        return t

    def is_trainable(self, name: str) -> bool:
        return name in self._params and name not in self._buffers

    def trainable_names(self) -> List[str]:
        return [n for n in self.names() if n not in self._buffers]

    def add_linear(self, name: str, fan_in: int, fan_out: int) -> Tensor:
        """Weight [fan_in×fan_out] from a normal truncated at two standard deviations."""
        w = self.rng.standard_normal((fan_in, fan_out))
        bad = np.abs(w) > 2.0
        while bad.any():
            w[bad] = self.rng.standard_normal(int(bad.sum()))
            bad = np.abs(w) > 2.0
        return self.add(name, w * LINEAR_INIT_STD)

    def add_conv(self, name: str, cout: int, cin: int, k: int) -> Tensor:
        std = np.sqrt(2.0 / (cin * k * k))
        return self.add(name, self.rng.standard_normal((cout, cin, k, k)) * std)

    def add_zeros(self, name: str, dims: Sequence[int]) -> Tensor:
        return self.add(name, np.zeros(tuple(dims)))

    def add_full(self, name: str, dims: Sequence[int], value: float) -> Tensor:
        return self.add(name, np.full(tuple(dims), value))

    # -------------------- Access --------------------

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise ContractError(f"Unknown parameter '{name}'") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return sorted(self._params)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._params[name]

    def with_prefix(self, prefix: str) -> List[str]:
        return [n for n in self.names() if n.startswith(prefix)]

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def set(self, name: str, value: np.ndarray) -> None:
        old = self[name]
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != old.dims:
            raise ShapeError(f"new value for '{name}' has wrong extents", old.dims, value.shape)
        self._params[name] = Tensor(value, requires_grad=name not in self._buffers)

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def set_grad(self, name: str, grad: np.ndarray) -> None:
        if grad.shape != self[name].dims:
            raise ShapeError(f"gradient for '{name}' has wrong extents", self[name].dims, grad.shape)
        self._grads[name] = grad

    def zero_grads(self) -> None:
        for name, t in self._params.items():
            self._grads[name] = np.zeros(t.dims, dtype=self.dtype)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in self._grads.values())))

    # -------------------- Copies --------------------

    def astype(self, dtype) -> "ParamStore":
        """Copy of every value cast to `dtype`; gradients start at zero."""
        out = ParamStore(self.seed, dtype)
        for name in self.names():
            out.add(name, self._params[name].data, trainable=self.is_trainable(name))
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    def values(self) -> Dict[str, np.ndarray]:
        return {name: t.numpy() for name, t in self.items()}


# -------------------- Optimizer --------------------

class Adam:
    """Adam with bias correction; the learning rate may change every step."""

    def __init__(self, params: ParamStore, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        names = params.trainable_names()
        self.m = {n: np.zeros(params[n].dims, dtype=params.dtype) for n in names}
        self.v = {n: np.zeros(params[n].dims, dtype=params.dtype) for n in names}

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in self.m:
            p = self.params[name]
            g = self.params.grad(name)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            self.params.set(name, p.data - update)


# -------------------- Checkpoints --------------------

def checkpoint_bytes(params: ParamStore) -> bytes:
    out = ByteWriter()
    out.raw(CHECKPOINT_MAGIC)
    out.u32(CHECKPOINT_VERSION)
    out.u32(len(params))
    for name, t in params.items():
        encoded = name.encode("utf-8")
        out.u32(len(encoded))
        out.raw(encoded)
        out.u32(len(t.dims))
        for d in t.dims:
            out.u32(d)
        out.f32(t.data.reshape(-1))
    return out.getvalue()


def parse_checkpoint(data: bytes) -> Dict[str, np.ndarray]:
    """Decode TCKP bytes into name → float32 array; raises FormatError on any defect."""
    r = ByteReader(data)
    r.expect(CHECKPOINT_MAGIC, "checkpoint magic")
    r.expect_u32(CHECKPOINT_VERSION, "checkpoint version")
    count = r.u32("entry count")
    entries: Dict[str, np.ndarray] = {}
    for _ in range(count):
        n = r.u32("name length")
        name = r.take(n, "parameter name").decode("utf-8")
        ndim = r.u32("ndim")
        dims = dims_tuple([r.u32("dim") for _ in range(ndim)])
        size = int(np.prod(dims)) if dims else 1
        entries[name] = r.f32(size, f"data of '{name}'").reshape(dims)
    r.require_end()
    return entries


def save_checkpoint(path: Union[str, Path], params: ParamStore) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(params))
    logger.info("Saved %d parameters to %s", len(params), path)
    return path


def load_checkpoint(path: Union[str, Path], params: ParamStore) -> None:
    """Overwrite `params` in place with the checkpoint values.

    Every name must be present with identical dims on both sides; otherwise
    CheckpointLoadError lists all offending names and nothing is changed.
    """
    entries = parse_checkpoint(Path(path).read_bytes())
    details: Dict[str, str] = {}
    for name, t in params.items():
        if name not in entries:
            details[name] = "missing from checkpoint"
        elif entries[name].shape != t.dims:
            details[name] = f"dims {list(entries[name].shape)} vs configured {list(t.dims)}"
    for name in entries:
        if name not in params:
            details[name] = "not in configured model"
    if details:
        raise CheckpointLoadError(sorted(details), details)
    for name, value in entries.items():
        params.set(name, value)
    logger.info("Loaded %d parameters from %s", len(entries), path)
