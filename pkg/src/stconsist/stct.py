"""STCT tensor container.

Layout (little-endian): b"STCT", u16 version, u8 rank, rank x u32 dims,
u8 dtype code (0 = f32, 1 = f64), raw payload in row-major order.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"STCT"
VERSION = 1
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class StctFormatError(ValueError):
    pass


def dumps(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float32)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODES:
        raise StctFormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise StctFormatError("rank too large")
    header = MAGIC + struct.pack("<HB", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("<B", _CODES[dt])
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def loads(blob: bytes) -> np.ndarray:
    buf = io.BytesIO(blob)
    if buf.read(4) != MAGIC:
        raise StctFormatError("bad magic")
    try:
        version, rank = struct.unpack("<HB", buf.read(3))
        dims = struct.unpack(f"<{rank}I", buf.read(4 * rank))
        (code,) = struct.unpack("<B", buf.read(1))
    except struct.error as exc:
        raise StctFormatError("truncated header") from exc
    if version != VERSION:
        raise StctFormatError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise StctFormatError(f"unknown dtype code {code}")
    dt = _DTYPES[code]
    payload = buf.read()
    count = int(np.prod(dims, dtype=np.int64))
    if len(payload) != count * dt.itemsize:
        raise StctFormatError(f"payload has {len(payload)} bytes, expected {count * dt.itemsize}")
    return np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def save(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(dumps(arr))


def load(path: str | Path) -> np.ndarray:
    return loads(Path(path).read_bytes())
