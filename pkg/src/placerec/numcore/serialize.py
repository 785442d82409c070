"""Little-endian binary container primitives and the PKT1 parameter checkpoint.

All integers are unsigned 64-bit little-endian, all reals are float64
little-endian, strings are a u64 byte length followed by UTF-8 bytes.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from placerec.errors import DataError

PKT_MAGIC = b"PKT1"
_U64 = struct.Struct("<Q")


def write_u64(fh: BinaryIO, value: int) -> None:
    fh.write(_U64.pack(int(value)))


def read_u64(fh: BinaryIO) -> int:
    raw = fh.read(8)
    if len(raw) != 8:
        raise DataError("truncated file: expected a 64-bit integer")
    return _U64.unpack(raw)[0]


def write_str(fh: BinaryIO, text: str) -> None:
    raw = text.encode("utf-8")
    write_u64(fh, len(raw))
    fh.write(raw)


def read_str(fh: BinaryIO) -> str:
    n = read_u64(fh)
    raw = fh.read(n)
    if len(raw) != n:
        raise DataError("truncated file: string shorter than its length prefix")
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"invalid UTF-8 in string field: {exc}") from None


def write_f64(fh: BinaryIO, values) -> None:
    fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_f64(fh: BinaryIO, count: int) -> np.ndarray:
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise DataError(f"truncated file: expected {count} float64 values")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def expect_magic(fh: BinaryIO, magic: bytes, path) -> None:
    got = fh.read(len(magic))
    if got != magic:
        raise DataError(f"{path}: bad magic {got!r}, expected {magic!r}")


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays in PKT1 format (order preserved)."""
    buf = io.BytesIO()
    buf.write(PKT_MAGIC)
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        write_str(buf, name)
        write_u64(buf, arr.ndim)
        for extent in arr.shape:
            write_u64(buf, extent)
        write_f64(buf, arr)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    fh = io.BytesIO(data)
    expect_magic(fh, PKT_MAGIC, path)
    out: dict[str, np.ndarray] = {}
    while fh.tell() < len(data):
        name = read_str(fh)
        rank = read_u64(fh)
        if rank > 32:
            raise DataError(f"{path}: implausible tensor rank {rank} for {name!r}")
        shape = tuple(read_u64(fh) for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        if name in out:
            raise DataError(f"{path}: duplicate tensor name {name!r}")
        out[name] = read_f64(fh, count).reshape(shape)
    return out
