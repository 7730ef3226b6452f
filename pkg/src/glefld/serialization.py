"""Binary named-tensor tables, weight files and checksummed checkpoints.

Tensor table layout (all integers little-endian)::

    u32 count
    count x { u16 name_len, name (utf-8), u8 ndim, ndim x u32 extent, f64[] data }

Weight file: ``u32 version`` followed by a tensor table.

Checkpoint file::

    b"GLECKPT\\0"  u32 version
    u32 meta_len, meta (utf-8 JSON, sorted keys)
    tensor table
    32-byte SHA-256 of every preceding byte
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

WEIGHTS_VERSION = 1
CHECKPOINT_VERSION = 1
CHECKPOINT_MAGIC = b"GLECKPT\0"


class FormatError(ValueError):
    """Raised for unreadable, truncated, corrupted or wrong-version files."""


class ChecksumError(FormatError):
    pass


def _encode_table(tensors: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode_table(reader: _Reader) -> dict:
    (count,) = reader.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(reader.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        if name in tensors:
            raise FormatError(f"{reader.what}: duplicate tensor name {name!r}")
        tensors[name] = arr
    return tensors


def write_weights(path, tensors: dict) -> None:
    Path(path).write_bytes(struct.pack("<I", WEIGHTS_VERSION) + _encode_table(tensors))


def read_weights(path) -> dict:
    reader = _Reader(Path(path).read_bytes(), str(path))
    (version,) = reader.unpack("<I")
    if version != WEIGHTS_VERSION:
        raise FormatError(f"{path}: weight format version {version}, expected {WEIGHTS_VERSION}")
    tensors = _decode_table(reader)
    if reader.pos != len(reader.data):
        raise FormatError(f"{path}: {len(reader.data) - reader.pos} trailing bytes")
    return tensors


def encode_checkpoint(meta: dict, tensors: dict) -> bytes:
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = (CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
            + struct.pack("<I", len(meta_raw)) + meta_raw + _encode_table(tensors))
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(data: bytes, what: str = "checkpoint") -> tuple:
    if len(data) < len(CHECKPOINT_MAGIC) + 4 + 32:
        raise FormatError(f"{what}: truncated ({len(data)} bytes)")
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{what}: not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    reader = _Reader(body, what)
    reader.take(len(CHECKPOINT_MAGIC))
    (version,) = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{what}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{what}: checksum mismatch (file corrupted or truncated)")
    (meta_len,) = reader.unpack("<I")
    meta = json.loads(reader.take(meta_len).decode("utf-8"))
    tensors = _decode_table(reader)
    if reader.pos != len(body):
        raise FormatError(f"{what}: {len(body) - reader.pos} unexpected bytes before checksum")
    return meta, tensors


def write_checkpoint_file(path, meta: dict, tensors: dict) -> None:
    Path(path).write_bytes(encode_checkpoint(meta, tensors))


def read_checkpoint_file(path) -> tuple:
    return decode_checkpoint(Path(path).read_bytes(), str(path))
