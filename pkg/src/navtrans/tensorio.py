"""Named-tensor archive.

Byte layout (all integers little-endian)::

    magic      4 bytes   b"NVTS"
    version    u32       FORMAT_VERSION
    meta_len   u64       length of the JSON metadata blob
    meta       bytes     UTF-8 JSON object (sorted keys)
    count      u32       number of tensors
    repeated `count` times, in name order:
        name_len  u32
        name      bytes  UTF-8
        ndim      u32
        dims      u64 * ndim
        values    f64 * prod(dims), row-major

Names are written sorted so that equal contents give equal bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"NVTS"
FORMAT_VERSION = 1


class ArchiveError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<Q", len(blob)), blob, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    view = memoryview(buf)
    pos = 0

    def read(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ArchiveError(f"truncated archive at byte {pos}")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(read(4)) != MAGIC:
        raise ArchiveError("not a tensor archive (bad magic)")
    (version,) = struct.unpack("<I", read(4))
    if version != FORMAT_VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    (meta_len,) = struct.unpack("<Q", read(8))
    meta = json.loads(bytes(read(meta_len)).decode("utf-8"))
    (count,) = struct.unpack("<I", read(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", read(4))
        name = bytes(read(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<I", read(4))
        dims = struct.unpack(f"<{ndim}Q", read(8 * ndim))
        n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(bytes(read(8 * n)), dtype="<f8").reshape(dims)
        tensors[name] = arr.astype(np.float64)
    if pos != len(view):
        raise ArchiveError(f"{len(view) - pos} trailing bytes after last tensor")
    return tensors, meta


def save(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
