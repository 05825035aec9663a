"""Binary tensor format.

Layout: magic "MLFDTNSR", format version (u16), dtype code (u8, 0 = IEEE-754
float64), rank (u8), extents (u64 each), then the payload little-endian in
row-major order. Round trips are bit-exact. `write_tensor`/`read_tensor`
operate on file objects so multiple tensors can be packed into one shard.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from mlfd.errors import CorruptionError, FormatError
from mlfd.numerics.tensor import Tensor

MAGIC = b"MLFDTNSR"
FORMAT_VERSION = 1
DTYPE_F64 = 0

_HEAD = struct.Struct("<8sHBB")


def write_tensor(fh, tensor) -> int:
    """Append one tensor at the current position; returns bytes written."""
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor, dtype=np.float64)
    if arr.dtype != np.float64:
        arr = arr.astype(np.float64)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    if arr.ndim > 255:
        raise FormatError(f"rank {arr.ndim} exceeds format limit")
    header = _HEAD.pack(MAGIC, FORMAT_VERSION, DTYPE_F64, arr.ndim)
    extents = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    payload = arr.astype("<f8", copy=False).tobytes(order="C")
    fh.write(header)
    fh.write(extents)
    fh.write(payload)
    return len(header) + len(extents) + len(payload)


def read_tensor(fh, context: str = "") -> Tensor:
    """Read one tensor starting at the current position."""
    where = f" in {context}" if context else ""
    head = fh.read(_HEAD.size)
    if len(head) != _HEAD.size:
        raise CorruptionError(f"truncated tensor header{where}")
    magic, version, dtype, rank = _HEAD.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}{where}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}{where}")
    if dtype != DTYPE_F64:
        raise FormatError(f"unsupported dtype code {dtype}{where}")
    raw_extents = fh.read(8 * rank)
    if len(raw_extents) != 8 * rank:
        raise CorruptionError(f"truncated extents{where}")
    shape = struct.unpack(f"<{rank}Q", raw_extents) if rank else ()
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise CorruptionError(f"truncated tensor payload{where}")
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return Tensor(arr)


def save_tensor(path, tensor) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        write_tensor(fh, tensor)


def load_tensor(path) -> Tensor:
    path = Path(path)
    with open(path, "rb") as fh:
        return read_tensor(fh, context=str(path))
