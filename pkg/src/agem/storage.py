"""File formats shared across the pipeline.

Binary tensor files ("AGTF"): magic bytes, format version (u32), a dtype tag
(1 = float32, 2 = float64), rank (u32), dims (u64 each), then raw row-major
little-endian data. Readers reject unknown versions and dtype tags.

Descriptor sets are stored as a JSON manifest (count, dim, id list, name of
the companion tensor file) next to one AGTF tensor of shape count x dim.
All writes are atomic (temp file + rename).
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericalError

MAGIC = b"AGTF"
FORMAT_VERSION = 1
_DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAG_FOR_KIND = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class FormatError(ValueError):
    """Malformed or unsupported file content."""


def _atomic_write(path: str, payload: bytes) -> None:
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


def atomic_text_write(path: str, emit) -> None:
    """Call emit(file_like) to produce text, then land it atomically."""
    buf = io.StringIO()
    emit(buf)
    _atomic_write(path, buf.getvalue().encode("utf-8"))


def write_tensor(path: str, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype not in _TAG_FOR_KIND:
        raise FormatError(f"cannot store dtype {arr.dtype}; use float32 or float64")
    tag = _TAG_FOR_KIND[arr.dtype]
    header = MAGIC + struct.pack("<III", FORMAT_VERSION, tag, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    data = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
    _atomic_write(path, header + data)


def read_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a tensor file (bad magic)")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    version, tag, rank = struct.unpack_from("<III", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if tag not in _DTYPE_TAGS:
        raise FormatError(f"{path}: unknown dtype tag {tag}")
    offset = 16
    if len(raw) < offset + 8 * rank:
        raise FormatError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{rank}Q", raw, offset) if rank else ()
    offset += 8 * rank
    dtype = _DTYPE_TAGS[tag]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    expected = count * dtype.itemsize
    if len(raw) - offset != expected:
        raise FormatError(f"{path}: payload is {len(raw) - offset} bytes, "
                          f"expected {expected}")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    arr = arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True)
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{path}: tensor contains non-finite values")
    return arr


def write_json(path: str, obj) -> None:
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path: str):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


@dataclass
class DescriptorSet:
    """Fixed-length descriptors keyed by string id, one matrix row each."""

    ids: list[str]
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise FormatError("descriptor matrix must be 2-D")
        if len(self.ids) != self.vectors.shape[0]:
            raise FormatError(f"{len(self.ids)} ids for "
                              f"{self.vectors.shape[0]} descriptor rows")
        if len(set(self.ids)) != len(self.ids):
            raise FormatError("descriptor ids must be unique")
        self._pos = {iid: i for i, iid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row(self, item_id: str) -> np.ndarray:
        try:
            return self.vectors[self._pos[item_id]]
        except KeyError:
            raise KeyError(f"unknown descriptor id {item_id!r}") from None


def _tensor_sibling(path: str) -> str:
    base = path[:-5] if path.endswith(".json") else path
    return base + ".agtf"


def save_descriptor_set(ds: DescriptorSet, path: str, extra: dict | None = None) -> None:
    """Write manifest JSON at ``path`` and the matrix next to it."""
    tensor_path = _tensor_sibling(path)
    manifest = {
        "count": len(ds.ids),
        "dim": ds.dim,
        "ids": list(ds.ids),
        "tensor": os.path.basename(tensor_path),
    }
    if extra:
        manifest.update(extra)
    write_tensor(tensor_path, ds.vectors)
    write_json(path, manifest)


def load_descriptor_set(path: str) -> DescriptorSet:
    manifest = read_json(path)
    for key in ("count", "dim", "ids", "tensor"):
        if key not in manifest:
            raise FormatError(f"{path}: descriptor manifest missing '{key}'")
    tensor_path = os.path.join(os.path.dirname(os.path.abspath(path)),
                               manifest["tensor"])
    vectors = read_tensor(tensor_path)
    if vectors.shape != (manifest["count"], manifest["dim"]):
        raise FormatError(f"{path}: tensor shape {vectors.shape} does not match "
                          f"manifest ({manifest['count']}, {manifest['dim']})")
    return DescriptorSet(ids=list(manifest["ids"]), vectors=vectors)
