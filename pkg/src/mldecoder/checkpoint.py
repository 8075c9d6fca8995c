"""Versioned binary checkpoints of named float64 parameters.

Layout (little-endian)::

    b"MLDCKPT\\0"  u32 version  u32 meta_len  meta (UTF-8 JSON, sorted keys)
    u32 count, then per parameter:
        u16 name_len  name (UTF-8)  u32 ndim  u64[ndim] shape  f64[prod(shape)] data
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError

MAGIC = b"MLDCKPT\0"
VERSION = 1


def checkpoint_to_bytes(state: dict, meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    raw_meta = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(raw_meta)))
    buf.write(raw_meta)
    buf.write(struct.pack("<I", len(state)))
    for name in sorted(state):
        arr = np.asarray(state[name], dtype="<f8")
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def checkpoint_from_bytes(raw: bytes):
    """Returns ``(state, meta)``."""
    buf = io.BytesIO(raw)
    if buf.read(8) != MAGIC:
        raise ConfigError("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    try:
        (mlen,) = struct.unpack("<I", buf.read(4))
        meta = json.loads(buf.read(mlen))
        (count,) = struct.unpack("<I", buf.read(4))
        state = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", buf.read(2))
            name = buf.read(nlen).decode()
            (ndim,) = struct.unpack("<I", buf.read(4))
            shape = struct.unpack(f"<{ndim}Q", buf.read(8 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            payload = buf.read(8 * n)
            if len(payload) != 8 * n:
                raise ConfigError(f"checkpoint truncated inside {name!r}")
            state[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    except struct.error as exc:
        raise ConfigError("checkpoint truncated") from exc
    return state, meta


def save_checkpoint(path, model, meta: dict | None = None):
    Path(path).write_bytes(checkpoint_to_bytes(model.state_dict(), meta))


def load_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes())
