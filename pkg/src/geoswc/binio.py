"""Little-endian struct helpers shared by the versioned binary formats."""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """A binary artifact has a bad magic, unsupported version or is truncated."""


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def raw(self, data: bytes) -> None:
        self._parts.append(data)

    def pack(self, fmt: str, *values) -> None:
        self._parts.append(struct.pack("<" + fmt, *values))

    def string(self, text: str) -> None:
        data = text.encode("utf-8")
        self.pack("I", len(data))
        self.raw(data)

    def array(self, arr: np.ndarray, dtype: str) -> None:
        self.raw(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes, what: str = "file") -> None:
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        values = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return values[0] if len(values) == 1 else values

    def string(self) -> str:
        n = self.unpack("I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.what}: invalid utf-8 string") from exc

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        buf = self.take(dt.itemsize * count)
        return np.frombuffer(buf, dtype=dt).astype(np.dtype(dtype), copy=True)

    def expect_magic(self, magic: bytes, versions: tuple[int, ...]) -> int:
        got = self.take(len(magic))
        if got != magic:
            raise FormatError(f"{self.what}: bad magic {got!r}, expected {magic!r}")
        version = self.unpack("H")
        if version not in versions:
            raise FormatError(f"{self.what}: unsupported format version {version}")
        return version

    def expect_end(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{self.what}: {len(self.data) - self.pos} trailing bytes")
