"""Little-endian framing for MCKV files.

Every file starts with::

    magic   4 bytes  b"MCKV"
    version u16
    record  u8       1 = model weights, 2 = document cache, 3 = query vector

The record body follows. Tensors are written as ``u8 ndim``, ``u32`` per
dimension, then row-major little-endian float32 data.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"MCKV"
VERSION = 1

RECORD_WEIGHTS = 1
RECORD_CACHE = 2
RECORD_VECTOR = 3


class Writer:
    def __init__(self, record: int):
        self.buf = io.BytesIO()
        self.buf.write(MAGIC)
        self.u16(VERSION)
        self.u8(record)

    def u8(self, x: int) -> None:
        self.buf.write(struct.pack("<B", x))

    def u16(self, x: int) -> None:
        self.buf.write(struct.pack("<H", x))

    def u32(self, x: int) -> None:
        self.buf.write(struct.pack("<I", x))

    def i64(self, x: int) -> None:
        self.buf.write(struct.pack("<q", x))

    def string(self, s: str) -> None:
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.buf.write(raw)

    def tensor(self, arr: np.ndarray, dtype: str = "<f4") -> None:
        arr = np.ascontiguousarray(arr, dtype=dtype)
        self.u8(arr.ndim)
        for dim in arr.shape:
            self.u32(dim)
        self.buf.write(arr.tobytes(order="C"))

    def getvalue(self) -> bytes:
        return self.buf.getvalue()


class Reader:
    def __init__(self, data: bytes, expected_record: int):
        self.data = data
        self.pos = 0
        if self.take(4) != MAGIC:
            raise FormatError("bad magic")
        version = self.u16()
        if version != VERSION:
            raise FormatError(f"unsupported format version {version}")
        record = self.u8()
        if record != expected_record:
            raise FormatError(f"record type {record}, expected {expected_record}")

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self.take(8))[0]

    def string(self) -> str:
        n = self.u32()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("invalid utf-8 string") from exc

    def tensor(self, dtype: str = "<f4") -> np.ndarray:
        ndim = self.u8()
        shape = tuple(self.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        itemsize = np.dtype(dtype).itemsize
        raw = self.take(count * itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype[1:], copy=True)

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes")
