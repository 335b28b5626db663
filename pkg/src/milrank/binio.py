"""Shared helpers for the little-endian binary file formats."""

from __future__ import annotations

import struct

import numpy as np


class FormatError(ValueError):
    """A binary file failed structural validation (bad magic, truncation...)."""


class Reader:
    """Sequential reader that reports the byte offset of the first problem."""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"{self.what}: truncated at offset {self.pos}: "
                f"need {n} bytes, have {len(self.data) - self.pos}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def expect_magic(self, magic: bytes) -> None:
        got = self.take(len(magic))
        if got != magic:
            raise FormatError(
                f"{self.what}: bad magic {got!r} at offset 0 (expected {magic!r})"
            )

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32_array(self, count: int) -> np.ndarray:
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4", count=count).astype(np.float64)

    def expect_end(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(
                f"{self.what}: {len(self.data) - self.pos} trailing bytes at offset {self.pos}"
            )


def u32_bytes(value: int) -> bytes:
    return struct.pack("<I", value)


def f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()
