#!/usr/bin/env python3
"""
errors.py
--------------------------------
Exception hierarchy shared by every module of the package.
"""
from __future__ import annotations

from typing import Dict, List, Optional, Sequence


class TctrError(Exception):
    """Base class for all errors raised by the package."""
    pass


class ShapeError(TctrError):
    """Raised when tensor extents do not satisfy an op's shape contract."""

    def __init__(self, message: str, *dims: Sequence[int]):
        self.dims = [list(d) for d in dims]
        if self.dims:
            message = f"{message} (dims: {' vs '.join(str(d) for d in self.dims)})"
        super().__init__(message)


class ContractError(TctrError):
    """Raised when an API precondition is violated."""
    pass


class NonFiniteError(TctrError):
    """Raised when an op produces NaN or Inf."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"Non-finite value produced by op '{op}'")


class ConfigError(TctrError):
    """Raised for unknown keys, bad values, or unknown mode/variant tags."""
    pass


class FormatError(TctrError):
    """Raised when a binary file (LSEQ or TCKP) is malformed."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} at byte offset {offset}")


class CheckpointLoadError(TctrError):
    """Raised when a checkpoint does not match the configured parameter shapes."""

    def __init__(self, names: List[str], details: Optional[Dict[str, str]] = None):
        self.names = list(names)
        self.details = details or {}
        lines = [f"  {n}: {self.details.get(n, 'mismatch')}" for n in self.names]
        super().__init__("Checkpoint does not match config:\n" + "\n".join(lines))


class GenerationError(TctrError):
    """Raised when the scene generator cannot place objects."""
    pass


class TrainingDiverged(TctrError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, step: int, last_losses: Dict[str, float], op: Optional[str] = None):
        self.step = step
        self.last_losses = dict(last_losses)
        detail = ", ".join(f"{k}={v:.6g}" for k, v in self.last_losses.items()) or "none"
        where = f" in op '{op}'" if op else ""
        super().__init__(f"Non-finite loss at step {step}{where}; last finite losses: {detail}")
