"""``DSPT`` parameter checkpoints.

Layout (little-endian): magic ``DSPT``, u32 version, u32 tensor count, then
per tensor u32 name length, UTF-8 name, u32 rank, u32 dims, f32 data. An
optional metadata block follows: u32 line count, then per line u32 length and
a UTF-8 ``key=value`` string.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError, TruncationError

MAGIC = b"DSPT"
VERSION = 1


def encode_checkpoint(tensors: dict, metadata: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if metadata is not None:
        parts.append(struct.pack("<I", len(metadata)))
        for key, value in metadata.items():
            if "=" in key or "\n" in str(value):
                raise ValueError(f"metadata entry {key!r} cannot be encoded as key=value")
            line = f"{key}={value}".encode("utf-8")
            parts.append(struct.pack("<I", len(line)) + line)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncationError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    @property
    def exhausted(self) -> bool:
        return self.pos == len(self.buf)


def decode_checkpoint(buf: bytes):
    r = _Reader(buf)
    magic = r.take(4)
    if magic != MAGIC:
        raise FormatError(f"not a DSPT checkpoint: magic {magic!r}")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported DSPT version {version}")
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    metadata = None
    if not r.exhausted:
        metadata = {}
        for _ in range(r.u32()):
            key, _, value = r.take(r.u32()).decode("utf-8").partition("=")
            metadata[key] = value
    if not r.exhausted:
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    return tensors, metadata


def save_checkpoint(path, tensors: dict, metadata: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors, metadata))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
