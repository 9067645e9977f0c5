"""Little-endian binary container primitives shared by MILE/MILW/MILP files."""

from __future__ import annotations

import struct

import numpy as np


class FormatError(Exception):
    """Bad magic, version, or structural layout in a binary container."""


class PayloadError(Exception):
    """Structurally valid container with an invalid payload (NaN/Inf, size)."""


def pack_header(magic: bytes, version: int, dims: tuple[int, ...]) -> bytes:
    return magic + struct.pack("<H", version) + struct.pack(f"<{len(dims)}I", *dims)


class Reader:
    def __init__(self, data: bytes, source: str = "<bytes>"):
        self.data = data
        self.pos = 0
        self.source = source

    def expect_magic(self, magic: bytes, version: int) -> None:
        if self.data[: len(magic)] != magic:
            raise FormatError(
                f"{self.source}: bad magic {self.data[:len(magic)]!r}, expected {magic!r}"
            )
        self.pos = len(magic)
        got = self.read_u16()
        if got != version:
            raise FormatError(f"{self.source}: unsupported version {got}, expected {version}")

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.source}: truncated at byte {self.pos} (need {n} more)")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def read_u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def read_u32s(self, count: int) -> tuple[int, ...]:
        return struct.unpack(f"<{count}I", self._take(4 * count))

    def read_f32_array(self, count: int, what: str) -> np.ndarray:
        arr = np.frombuffer(self._take(4 * count), dtype="<f4")
        if not np.all(np.isfinite(arr)):
            raise PayloadError(f"{self.source}: non-finite values in {what}")
        return arr.copy()

    def read_optional_string(self) -> str | None:
        if self.pos >= len(self.data):
            return None
        length = self.read_u16()
        return self._take(length).decode("utf-8")

    def expect_end(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(
                f"{self.source}: {len(self.data) - self.pos} trailing bytes after payload"
            )


def f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()
