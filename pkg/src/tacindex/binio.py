"""Small helpers for the fixed-header little-endian binary files."""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import MalformedHeaderError, SizeMismatchError


class BlobReader:
    """Sequential reader over a whole file held in memory."""

    def __init__(self, path):
        self.path = Path(path)
        self.buf = self.path.read_bytes()
        self.pos = 0

    def header(self, magic: bytes, fmt: str) -> tuple:
        st = struct.Struct("<8s" + fmt)
        if len(self.buf) < st.size:
            raise MalformedHeaderError(f"{self.path}: truncated header")
        values = st.unpack_from(self.buf, 0)
        if values[0] != magic:
            raise MalformedHeaderError(f"{self.path}: bad magic {values[0]!r}, expected {magic!r}")
        self.pos = st.size
        return values[1:]

    def array(self, dtype, count: int) -> np.ndarray:
        nbytes = count * np.dtype(dtype).itemsize
        if self.pos + nbytes > len(self.buf):
            raise SizeMismatchError(f"{self.path}: payload shorter than declared sizes")
        out = np.frombuffer(self.buf, dtype=dtype, count=count, offset=self.pos).copy()
        self.pos += nbytes
        return out

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise SizeMismatchError(f"{self.path}: {len(self.buf) - self.pos} trailing bytes")


def write_blob(path, magic: bytes, fmt: str, fields: tuple, arrays) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<8s" + fmt, magic, *fields))
        for arr, dtype in arrays:
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
