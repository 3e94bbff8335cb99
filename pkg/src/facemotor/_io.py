"""Shared binary container helpers.

Every file starts with a 4-byte magic and a u16 format version; everything
after is little-endian. Float arrays are stored as raw ``<f8``.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np


class FormatError(ValueError):
    pass


class Writer:
    def __init__(self, magic: bytes, version: int = 1):
        if len(magic) != 4:
            raise ValueError("magic must be 4 bytes")
        self._parts = [magic, struct.pack("<H", version)]

    def u8(self, v):
        self._parts.append(struct.pack("<B", v))

    def u32(self, v):
        self._parts.append(struct.pack("<I", v))

    def u64(self, v):
        self._parts.append(struct.pack("<Q", v))

    def f64(self, v):
        self._parts.append(struct.pack("<d", v))

    def text(self, s: str):
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self._parts.append(raw)

    def floats(self, a):
        self._parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())

    def ints(self, a, dtype="<u4"):
        self._parts.append(np.ascontiguousarray(a, dtype=dtype).tobytes())

    def array(self, a):
        """Shape-prefixed float array."""
        a = np.asarray(a, dtype=float)
        self.u32(a.ndim)
        for d in a.shape:
            self.u32(d)
        self.floats(a)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes, magic: bytes, versions=(1,)):
        self.data = bytes(data)
        self.pos = 0
        got = self._take(4)
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}")
        (self.version,) = struct.unpack("<H", self._take(2))
        if self.version not in versions:
            raise FormatError(f"unsupported {magic.decode()} version {self.version}")

    def _take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError("truncated file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return struct.unpack("<B", self._take(1))[0]

    def u32(self):
        return struct.unpack("<I", self._take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self._take(8))[0]

    def f64(self):
        return struct.unpack("<d", self._take(8))[0]

    def text(self):
        return self._take(self.u32()).decode("utf-8")

    def floats(self, shape):
        n = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self._take(8 * n), dtype="<f8").astype(float).reshape(shape)

    def ints(self, shape, dtype="<u4"):
        dt = np.dtype(dtype)
        n = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self._take(dt.itemsize * n), dtype=dt).astype(np.int64).reshape(shape)

    def array(self):
        ndim = self.u32()
        shape = tuple(self.u32() for _ in range(ndim))
        return self.floats(shape)

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes")


def digest(data: bytes) -> bytes:
    """First 16 bytes of SHA-256, used to tie files to their source oracle."""
    return hashlib.sha256(data).digest()[:16]


def rng_for(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator whose stream is derived from (seed, *stream)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))
