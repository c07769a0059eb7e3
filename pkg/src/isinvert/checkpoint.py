"""Tagged tensor container shared by LM weights, detectors and inverters.

Layout (little-endian)::

    magic[4] | version u16 | meta_len u32 | meta (UTF-8 JSON)
    | n_tensors u32 | { name_len u16 | name | ndim u8 | dims u32*ndim | f32 payload }*
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

VERSION = 1


class CheckpointError(ValueError):
    pass


def to_bytes(magic: bytes, meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [magic, struct.pack("<HI", VERSION, len(meta_raw)), meta_raw, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def from_bytes(data: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:4] != magic:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {magic!r}")
    version, meta_len = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    off = 10
    meta = json.loads(data[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        if off + 4 * size > len(data):
            raise CheckpointError(f"truncated tensor {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 4 * size
    return meta, tensors


def save(path: str | Path, magic: bytes, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(to_bytes(magic, meta, tensors))


def load(path: str | Path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return from_bytes(Path(path).read_bytes(), magic)
