"""Little-endian helpers for the package's binary file formats."""

import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError, TruncatedFileError


def write_file(path, magic, chunks):
    """Write ``magic`` followed by ``chunks`` (bytes or arrays) to ``path``."""
    with open(path, "wb") as fh:
        fh.write(magic)
        for chunk in chunks:
            if isinstance(chunk, np.ndarray):
                fh.write(np.ascontiguousarray(chunk).tobytes())
            else:
                fh.write(chunk)


def u32(x):
    return struct.pack("<I", int(x))


def u64(x):
    return struct.pack("<Q", int(x))


class Reader:
    """Sequential reader over an in-memory file image."""

    def __init__(self, path, magic):
        self.data = Path(path).read_bytes()
        self.pos = 0
        found = self.data[: len(magic)]
        if found != magic:
            raise BadMagicError(magic, found)
        self.pos = len(magic)

    def __len__(self):
        return len(self.data)

    def require(self, total_bytes):
        if len(self.data) < total_bytes:
            raise TruncatedFileError(total_bytes, len(self.data))

    def _take(self, n):
        self.require(self.pos + n)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self._take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self._take(8))[0]

    def array(self, dtype, count):
        dtype = np.dtype(dtype).newbyteorder("<")
        raw = self._take(dtype.itemsize * count)
        return np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("="))
