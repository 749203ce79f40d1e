#!/usr/bin/env python3
"""
Binary sidecar format shared by every persisted artifact.

Header: magic "DCOK", version u32, D u32, kind u8. The payload that follows is
kind-specific and always little-endian; floats are 32-bit and matrices row-major.
"""

import struct

import numpy as np

MAGIC = b"DCOK"
VERSION = 1

KIND_PCA = 1
KIND_ORTHO = 2
KIND_PQ = 3
KIND_HNSW = 4
KIND_IVF = 5
KIND_LINEAR = 6

KIND_NAMES = {
    KIND_PCA: "PCA",
    KIND_ORTHO: "ORTHO",
    KIND_PQ: "PQ",
    KIND_HNSW: "HNSW",
    KIND_IVF: "IVF",
    KIND_LINEAR: "LINEAR",
}

_HEADER = struct.Struct("<4sIIB")


class SidecarWriter:
    def __init__(self, f):
        self.f = f

    def header(self, dim: int, kind: int):
        self.f.write(_HEADER.pack(MAGIC, VERSION, dim, kind))

    def u32(self, value: int):
        self.f.write(struct.pack("<I", value))

    def i32(self, value: int):
        self.f.write(struct.pack("<i", value))

    def u64(self, value: int):
        self.f.write(struct.pack("<Q", value))

    def f64(self, value: float):
        self.f.write(struct.pack("<d", value))

    def floats(self, arr):
        self.f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    def doubles(self, arr):
        self.f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def ints(self, arr):
        self.f.write(np.ascontiguousarray(arr, dtype="<i4").tobytes())


class SidecarReader:
    def __init__(self, f, path="<stream>"):
        self.f = f
        self.path = path

    def _take(self, size: int) -> bytes:
        data = self.f.read(size)
        if len(data) != size:
            raise ValueError(f"Truncated sidecar file {self.path}: wanted {size} bytes, got {len(data)}")
        return data

    def header(self, expected_kind: int) -> int:
        magic, version, dim, kind = _HEADER.unpack(self._take(_HEADER.size))
        if magic != MAGIC:
            raise ValueError(f"{self.path} is not a sidecar file (magic {magic!r})")
        if version != VERSION:
            raise ValueError(f"{self.path} has unsupported sidecar version {version}")
        if kind != expected_kind:
            raise ValueError(
                f"{self.path} holds a {KIND_NAMES.get(kind, kind)} artifact, "
                f"expected {KIND_NAMES[expected_kind]}"
            )
        return dim

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def i32(self) -> int:
        return struct.unpack("<i", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def floats(self, count: int, shape=None) -> np.ndarray:
        arr = np.frombuffer(self._take(4 * count), dtype="<f4").astype(np.float32)
        return arr.reshape(shape) if shape is not None else arr

    def doubles(self, count: int) -> np.ndarray:
        return np.frombuffer(self._take(8 * count), dtype="<f8").astype(np.float64)

    def ints(self, count: int) -> np.ndarray:
        return np.frombuffer(self._take(4 * count), dtype="<i4").astype(np.int32)

    def expect_end(self):
        if self.f.read(1):
            raise ValueError(f"Trailing bytes after sidecar payload in {self.path}")
