"""Binary parameter checkpoints.

Layout (little-endian)::

    b"LCUN"  version:u16  count:u32
    count x { name_len:u16  name:utf-8  rank:u8  extents:u32*rank  float32 payload }
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import NetworkError

MAGIC = b"LCUN"
VERSION = 1


def save_checkpoint(path, state: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    parts = [MAGIC, struct.pack("<HI", VERSION, len(state))]
    for name in sorted(state):
        value = np.asarray(state[name])
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    path.write_bytes(b"".join(parts))
    return path


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise NetworkError(f"checkpoint not found: {path}") from None
    if data[:4] != MAGIC:
        raise NetworkError(f"{path}: not an LCUN checkpoint")
    try:
        version, count = struct.unpack_from("<HI", data, 4)
        if version != VERSION:
            raise NetworkError(f"{path}: unsupported checkpoint version {version}")
        off = 10
        state = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if off + 4 * size > len(data):
                raise NetworkError(f"{path}: truncated payload for {name}")
            state[name] = np.frombuffer(data, "<f4", size, off).reshape(shape).astype(np.float32)
            off += 4 * size
    except struct.error:
        raise NetworkError(f"{path}: truncated checkpoint") from None
    if off != len(data):
        raise NetworkError(f"{path}: {len(data) - off} trailing bytes")
    return state
