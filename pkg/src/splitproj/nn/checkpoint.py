"""Binary parameter checkpoints.

Layout: magic ``SPLNN1`` followed by one record per tensor::

    u32 name_len | name (utf-8) | u32 rank | u32 extent * rank | f32 payload

All integers and floats are little-endian.
"""
from __future__ import annotations

import struct

import numpy as np

from ..errors import FormatError

MAGIC = b"SPLNN1"


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name, value in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    out = {}
    pos = len(MAGIC)
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            if len(name.encode()) != n:
                raise FormatError("truncated tensor name")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            end = pos + 4 * count
            if end > len(blob):
                raise FormatError(f"truncated payload for {name}")
            out[name] = np.frombuffer(blob[pos:end], dtype="<f4").reshape(shape).astype(np.float32)
            pos = end
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from None
    return out


def save(path, tensors: dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
