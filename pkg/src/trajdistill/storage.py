"""Binary tensor files: ``TDCK`` magic, u32 version, layout records, f64 payload.

All integers and floats are little-endian.  Record layout::

    u32 record count
    per record: u16 name length, name (utf-8), u32 ndim, u32 dims..., u64 offset
    u64 value count, then that many f64 values
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .nn import LayerRecord

MAGIC = b"TDCK"
VERSION = 1


class StorageError(ValueError):
    pass


class VersionMismatchError(StorageError):
    pass


class ChecksumError(StorageError):
    pass


class LayoutMismatchError(StorageError):
    pass


def encode(records, values: np.ndarray) -> bytes:
    values = np.ascontiguousarray(values, dtype="<f8").reshape(-1)
    parts = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for r in records:
        name = r.name.encode()
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack(f"<I{len(r.shape)}I", len(r.shape), *r.shape))
        parts.append(struct.pack("<Q", r.offset))
    parts.append(struct.pack("<Q", values.size))
    parts.append(values.tobytes())
    return b"".join(parts)


def decode(raw: bytes):
    """Inverse of :func:`encode`; returns ``(records, values)``."""
    if raw[:4] != MAGIC:
        raise StorageError("not a TDCK tensor file")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise VersionMismatchError(f"tensor file version {version}, expected {VERSION}")
        pos = 12
        records = []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + n].decode()
            pos += 2 + n
            (ndim,) = struct.unpack_from("<I", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 4)
            pos += 4 + 4 * ndim
            (offset,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            records.append(LayerRecord(name, tuple(shape), int(offset)))
        (size,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
    except struct.error:
        raise StorageError("truncated tensor file header") from None
    if len(raw) - pos != 8 * size:
        raise StorageError(f"payload holds {len(raw) - pos} bytes, expected {8 * size}")
    values = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).astype(np.float64)
    return tuple(records), values


def write(path, records, values) -> str:
    """Write a tensor file and return its sha256 hex digest."""
    raw = encode(records, values)
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def read(path, expected_sha256: str | None = None):
    raw = Path(path).read_bytes()
    if expected_sha256 is not None and hashlib.sha256(raw).hexdigest() != expected_sha256:
        raise ChecksumError(f"{path}: checksum mismatch")
    return decode(raw)
