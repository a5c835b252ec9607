"""Flat binary weight checkpoints.

Layout (all little-endian): magic ``TVTW``, version u32, tensor count u32,
then per tensor: name length u32, UTF-8 name, rank u32, extents u64 each,
raw float64 data. Round-trips are bit-exact; writes go through a temp file
and an atomic rename.
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor

MAGIC = b"TVTW"
VERSION = 1


def _coerce(value) -> np.ndarray:
    arr = value.array if isinstance(value, Tensor) else np.asarray(value)
    return np.ascontiguousarray(arr, dtype="<f8")


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, Tensor | np.ndarray]) -> None:
    """Write named tensors in mapping order. Names are section-prefixed
    (e.g. ``tryonnet/block0/wq``) so sections can be compared wholesale."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(tensors))
    for name, value in tensors.items():
        arr = _coerce(value)
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blob += arr.tobytes(order="C")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Read a checkpoint back into an ordered name -> float64 array dict."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    offset = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        extents = struct.unpack_from(f"<{rank}Q", raw, offset)
        offset += 8 * rank
        n = int(np.prod(extents, dtype=np.int64)) if rank else 1
        data = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).copy()
        offset += 8 * n
        out[name] = data.reshape(extents)
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return out


def section(tensors: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    """Sub-dict of entries whose name starts with ``prefix + '/'``."""
    key = prefix + "/"
    return {k: v for k, v in tensors.items() if k.startswith(key)}


def section_bytes(tensors: Mapping[str, np.ndarray | Tensor], prefix: str) -> bytes:
    """Canonical byte string of one section, for freeze-contract checks."""
    parts = []
    for name in sorted(tensors):
        if not name.startswith(prefix + "/"):
            continue
        arr = _coerce(tensors[name])
        parts.append(name.encode() + b"\x00" + arr.tobytes(order="C"))
    return b"".join(parts)
