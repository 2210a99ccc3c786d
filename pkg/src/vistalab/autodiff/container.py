"""VSTA1 tensor container.

Layout, all integers unsigned 64-bit little-endian::

    b"VSTA1" | entry_count
    per entry: name_len | utf-8 name | rank | dims[rank] | float64-le data
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"VSTA1"
MANIFEST_KEY = "__manifest__"


class ContainerError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray], manifest: dict | None = None) -> bytes:
    items = dict(tensors)
    if manifest is not None:
        raw = json.dumps(manifest, sort_keys=True).encode()
        items[MANIFEST_KEY] = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
    out = [MAGIC, struct.pack("<Q", len(items))]
    for name, arr in items.items():
        arr = np.asarray(getattr(arr, "data", arr), dtype=np.float64)
        key = name.encode("utf-8")
        out.append(struct.pack("<Q", len(key)))
        out.append(key)
        out.append(struct.pack("<Q", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    return b"".join(out)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict | None]:
    if buf[:5] != MAGIC:
        raise ContainerError("not a VSTA1 container")
    pos = 5

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ContainerError("truncated container")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<Q", take(8))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<Q", take(8))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64)
        tensors[name] = data.reshape(dims)
    if pos != len(buf):
        raise ContainerError("trailing bytes after last entry")
    manifest = None
    if MANIFEST_KEY in tensors:
        raw = tensors.pop(MANIFEST_KEY).astype(np.uint8).tobytes()
        manifest = json.loads(raw.decode())
    return tensors, manifest


def save(path, tensors: Mapping[str, np.ndarray], manifest: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, manifest))


def load(path) -> tuple[dict[str, np.ndarray], dict | None]:
    return loads(Path(path).read_bytes())
