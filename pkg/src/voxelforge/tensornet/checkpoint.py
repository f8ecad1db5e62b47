"""Flat binary parameter checkpoints.

Layout, all little-endian: magic "TNPK", u32 parameter count, then per
parameter a u16 name length, the UTF-8 name, a u8 axis count, u32
extents, and the float32 payload in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"TNPK"


class CheckpointError(ValueError):
    """A checkpoint file violates the TNPK layout."""

    def __init__(self, fieldname: str, message: str):
        self.fieldname = fieldname
        super().__init__(f"{fieldname}: {message}")


def save_params(params: Mapping[str, "np.ndarray | Tensor"], path) -> None:
    chunks = [MAGIC, struct.pack("<I", len(params))]
    for name, value in params.items():
        # asarray keeps 0-d shapes; ascontiguousarray would promote them to 1-d
        arr = np.asarray(
            value.data if isinstance(value, Tensor) else value, dtype="<f4", order="C"
        )
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError("name", f"parameter name too long ({len(encoded)} bytes)")
        if arr.ndim > 0xFF:
            raise CheckpointError("dims", f"too many axes ({arr.ndim})")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back as name -> float32 array, in file order."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise CheckpointError("header", f"file too short ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise CheckpointError("magic", f"expected {MAGIC!r}, got {raw[:4]!r}")
    (count,) = struct.unpack_from("<I", raw, 4)
    offset = 8
    out: dict[str, np.ndarray] = {}

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(raw):
            raise CheckpointError(what, "truncated file")
        piece = raw[offset : offset + n]
        offset += n
        return piece

    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name"))
        name = take(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "dims"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        n_values = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        payload = take(4 * n_values, "payload")
        if name in out:
            raise CheckpointError("name", f"duplicate parameter {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if offset != len(raw):
        raise CheckpointError("payload", f"{len(raw) - offset} trailing bytes")
    return out
