"""Binary checkpoint format.

Layout (all integers unsigned 32-bit little-endian)::

    b"SDIL" | version | entry count
    per entry: name length | UTF-8 name | rank | extents... | float32 LE payload
    metadata length | UTF-8 JSON metadata (config, vocabulary sizes, seed)
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SDIL"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: dict[str, np.ndarray], meta: dict) -> None:
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", VERSION, len(state))
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
        buf += arr.tobytes()
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(blob)) + blob
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an SDIL checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    state = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, off)
            name = data[off + 4:off + 4 + n].decode("utf-8")
            off += 4 + n
            (rank,) = struct.unpack_from("<I", data, off)
            shape = struct.unpack_from(f"<{rank}I", data, off + 4)
            off += 4 + 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            state[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 4 * size
        (n,) = struct.unpack_from("<I", data, off)
        meta = json.loads(data[off + 4:off + 4 + n].decode("utf-8"))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    return state, meta
