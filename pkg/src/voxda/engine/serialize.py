"""Binary snapshot formats for tensors and named-tensor checkpoints.

Tensor record ("WDGT1"): magic, u8 dtype code (0 = float32, 1 = float64),
u8 rank, little-endian u32 extents, then the raw values little-endian in
row-major order.  Checkpoint file ("WDGC1"): magic, u32 record count, then
(u32 name length, UTF-8 name, tensor record) repeated.  Round trips are
bit-exact.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .tensor import Tensor

TENSOR_MAGIC = b"WDGT1"
CHECKPOINT_MAGIC = b"WDGC1"

_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

MAX_EXTENT = 2**31
MAX_ELEMENTS = 2**33


class SerializationError(ValueError):
    """Malformed or truncated snapshot; message names the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _read_exact(f, n: int, what: str) -> bytes:
    offset = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise SerializationError(f"truncated while reading {what}", offset)
    return buf


def write_tensor(f, t) -> None:
    """Append one tensor record to a binary stream."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    code = _DTYPE_TO_CODE.get(arr.dtype)
    if code is None:
        raise SerializationError(f"unsupported dtype {arr.dtype}", f.tell())
    if arr.ndim > 255:
        raise SerializationError(f"rank {arr.ndim} exceeds format limit", f.tell())
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<BB", code, arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(np.ascontiguousarray(arr, dtype=_CODE_TO_DTYPE[code]).tobytes())


def read_tensor(f) -> Tensor:
    """Read one tensor record from a binary stream."""
    offset = f.tell()
    magic = _read_exact(f, len(TENSOR_MAGIC), "tensor magic")
    if magic != TENSOR_MAGIC:
        raise SerializationError(f"bad tensor magic {magic!r}", offset)
    offset = f.tell()
    code, rank = struct.unpack("<BB", _read_exact(f, 2, "dtype/rank header"))
    dtype = _CODE_TO_DTYPE.get(code)
    if dtype is None:
        raise SerializationError(f"unknown dtype code {code}", offset)
    shape = []
    count = 1
    for _ in range(rank):
        offset = f.tell()
        (d,) = struct.unpack("<I", _read_exact(f, 4, "extent"))
        if d > MAX_EXTENT:
            raise SerializationError(f"extent {d} exceeds limit", offset)
        shape.append(d)
        count *= d
        if count > MAX_ELEMENTS:
            raise SerializationError(f"element count {count} exceeds limit", offset)
    payload = _read_exact(f, count * dtype.itemsize, "tensor values")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return Tensor(arr.astype(arr.dtype.newbyteorder("=")))


def save_tensor(path, t) -> None:
    with open(path, "wb") as f:
        write_tensor(f, t)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        return read_tensor(f)


def write_checkpoint(path, tensors: dict) -> None:
    """Write a name -> Tensor map; records are sorted by name for stable bytes."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        write_tensor(buf, tensors[name])
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def read_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        offset = f.tell()
        magic = _read_exact(f, len(CHECKPOINT_MAGIC), "checkpoint magic")
        if magic != CHECKPOINT_MAGIC:
            raise SerializationError(f"bad checkpoint magic {magic!r}", offset)
        (count,) = struct.unpack("<I", _read_exact(f, 4, "record count"))
        out = {}
        for _ in range(count):
            offset = f.tell()
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            if name_len > 2**16:
                raise SerializationError(f"name length {name_len} exceeds limit", offset)
            raw = _read_exact(f, name_len, "record name")
            try:
                name = raw.decode("utf-8")
            except UnicodeDecodeError:
                raise SerializationError("record name is not valid UTF-8", offset) from None
            out[name] = read_tensor(f)
        trailing = f.read(1)
        if trailing:
            raise SerializationError("trailing bytes after last record", f.tell() - 1)
        return out
