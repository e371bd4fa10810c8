"""Little-endian binary reading and writing shared by the LSEQ and TCKP formats."""
from __future__ import annotations

import struct
from typing import List, Tuple

import numpy as np

from .errors import FormatError

U32 = struct.Struct("<I")


class ByteWriter:
    def __init__(self) -> None:
        self._chunks: List[bytes] = []

    def raw(self, data: bytes) -> None:
        self._chunks.append(data)

    def u32(self, value: int) -> None:
        self._chunks.append(U32.pack(int(value)))

    def f32(self, values) -> None:
        self._chunks.append(np.asarray(values, dtype="<f4").tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._chunks)


class ByteReader:
    """Cursor over a byte buffer; every short read raises FormatError at the current offset."""

    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.offset + n > len(self.data):
            raise FormatError(f"truncated {what}", self.offset)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self, what: str) -> int:
        return U32.unpack(self.take(4, what))[0]

    def f32(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, what), dtype="<f4").astype(np.float32)

    def expect(self, magic: bytes, what: str) -> None:
        start = self.offset
        if self.take(len(magic), what) != magic:
            raise FormatError(f"bad {what} (expected {magic!r})", start)

    def expect_u32(self, value: int, what: str) -> None:
        start = self.offset
        got = self.u32(what)
        if got != value:
            raise FormatError(f"unsupported {what} {got} (expected {value})", start)

    def at_end(self) -> bool:
        return self.offset == len(self.data)

    def require_end(self) -> None:
        if not self.at_end():
            raise FormatError(f"{len(self.data) - self.offset} trailing bytes", self.offset)


def dims_tuple(values: List[int]) -> Tuple[int, ...]:
    return tuple(int(v) for v in values)
