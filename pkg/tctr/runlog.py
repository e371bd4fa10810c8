#!/usr/bin/env python3
"""
runlog.py
--------------------------------
Line-based run records: `<kind> key=value key=value ...`.

Kinds written by the harness:

    config       key, value (one per resolved config key)
    step         step, lr, l_cls, l_loc, l_dir, total, grad_norm
    eval         class, threshold, ap, tp, fp, fn
    detection    sequence, class, score, x, y, z, l, w, h, yaw
    gradcheck    group, max_rel_err, checked
    ablate       axis, variant, map, ap.<class>
    run_summary  config_hash, seed, steps, final_loss, map, per_class_ap.<class>, wall_seconds

Values containing spaces or quotes are shell-quoted, so parse_record returns
them verbatim. Newlines become spaces.
"""
from __future__ import annotations

import logging
import shlex
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

SUMMARY_FIELDS = ("config_hash", "seed", "steps", "final_loss", "map", "wall_seconds")


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return shlex.quote(str(value).replace("\n", " "))


def format_record(kind: str, **fields: Any) -> str:
    parts = [kind] + [f"{k}={format_value(v)}" for k, v in fields.items()]
    return " ".join(parts)


def parse_record(line: str) -> Tuple[str, Dict[str, str]]:
    """Invert format_record; values stay strings."""
    parts = shlex.split(line)
    if not parts:
        raise ValueError("empty record")
    fields: Dict[str, str] = {}
    for part in parts[1:]:
        key, sep, value = part.partition("=")
        if not sep:
            raise ValueError(f"malformed field '{part}' in record '{line.strip()}'")
        fields[key] = value
    return parts[0], fields


class RunLog:
    """Append-only record file at `<out_dir>/run.log`, also kept in memory."""

    def __init__(self, out_dir: Optional[Union[str, Path]] = None, name: str = "run.log"):
        self.lines: List[str] = []
        self.path: Optional[Path] = None
        self._logger: Optional[logging.Logger] = None
        self._handler: Optional[logging.Handler] = None
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            self.path = out / name
            self._logger = logging.getLogger(f"tctr.runlog.{id(self)}")
            self._logger.setLevel(logging.INFO)
            self._logger.propagate = False
            self._handler = logging.FileHandler(self.path, mode="w", encoding="utf-8")
            self._handler.setFormatter(logging.Formatter("%(message)s"))
            self._logger.addHandler(self._handler)

    def record(self, kind: str, **fields: Any) -> str:
        line = format_record(kind, **fields)
        self.lines.append(line)
        if self._logger is not None:
            self._logger.info(line)
        return line

    def config(self, echo_lines: List[str]) -> None:
        for line in echo_lines:
            key, _, value = line.partition(" = ")
            self.record("config", key=key, value=value)

    def records(self, kind: Optional[str] = None) -> List[Dict[str, str]]:
        out = []
        for line in self.lines:
            k, fields = parse_record(line)
            if kind is None or k == kind:
                out.append(fields)
        return out

    def close(self) -> None:
        if self._handler is not None:
            self._handler.close()
            self._logger.removeHandler(self._handler)
            self._handler = None

    def __enter__(self) -> "RunLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_records(path: Union[str, Path], kind: Optional[str] = None) -> List[Dict[str, str]]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        k, fields = parse_record(line)
        if kind is None or k == kind:
            out.append(fields)
    return out
