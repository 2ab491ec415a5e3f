"""Standalone AGTF tensor files.

The engine and this bridge share nothing but bytes, so the format is
implemented here from its definition rather than imported: magic b"AGTF",
format version (u32), dtype tag (1 = float32, 2 = float64), rank (u32),
dims (u64 each), then the raw row-major little-endian payload.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

MAGIC = b"AGTF"
FORMAT_VERSION = 1
_TAG_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_TO_TAG = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class FormatError(ValueError):
    """Malformed or unsupported file content."""


def _atomic_write(path, payload: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-agtf-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(path, array) -> None:
    """Write a float32/float64 array; refuses non-finite payloads."""
    arr = np.asarray(array)
    if arr.dtype not in _DTYPE_TO_TAG:
        raise FormatError(f"cannot store dtype {arr.dtype}; use float32 or float64")
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: refusing to write non-finite values")
    header = MAGIC + struct.pack("<III", FORMAT_VERSION,
                                 _DTYPE_TO_TAG[arr.dtype], arr.ndim)
    if arr.ndim:
        header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
    _atomic_write(path, header + payload)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a tensor file (bad magic)")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    version, tag, rank = struct.unpack_from("<III", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if tag not in _TAG_TO_DTYPE:
        raise FormatError(f"{path}: unknown dtype tag {tag}")
    offset = 16
    if len(raw) < offset + 8 * rank:
        raise FormatError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{rank}Q", raw, offset) if rank else ()
    offset += 8 * rank
    dtype = _TAG_TO_DTYPE[tag]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(raw) - offset != count * dtype.itemsize:
        raise FormatError(f"{path}: payload is {len(raw) - offset} bytes, "
                          f"expected {count * dtype.itemsize}")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    arr = arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: tensor contains non-finite values")
    return arr
