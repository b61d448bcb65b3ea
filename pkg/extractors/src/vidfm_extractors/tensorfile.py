"""Reader/writer for the shared binary tensor container.

Layout, all little-endian: 4-byte magic "VFPB", u32 format version (1), u8
dtype code (0 = float32), u8 ndim, then ndim u64 dimensions, then the
row-major payload. This implementation is intentionally self-contained so the
extractor side can validate clips without depending on the consumer.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

MAGIC = b"VFPB"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 0


class TensorFileError(Exception):
    pass


class BadMagicError(TensorFileError):
    pass


class VersionMismatchError(TensorFileError):
    pass


class UnsupportedDtypeError(TensorFileError):
    pass


class TruncatedFileError(TensorFileError):
    pass


def write_tensor(array: np.ndarray, path: str | Path) -> None:
    """Serialize a float32 tensor; writes are atomic via a rename."""
    array = np.asarray(array)
    if array.ndim == 0:
        raise ValueError("zero-dimensional tensors are not representable")
    if not np.issubdtype(array.dtype, np.floating) and not np.issubdtype(array.dtype, np.integer):
        raise UnsupportedDtypeError(f"cannot encode dtype {array.dtype}")
    data = np.ascontiguousarray(array, dtype="<f4")
    header = bytearray()
    header += MAGIC
    header += FORMAT_VERSION.to_bytes(4, "little")
    header += bytes([DTYPE_FLOAT32, data.ndim])
    for dim in data.shape:
        header += int(dim).to_bytes(8, "little")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(bytes(header))
        f.write(data.tobytes())
    os.replace(tmp, path)


def _take(buf: bytes, offset: int, count: int, what: str) -> bytes:
    if offset + count > len(buf):
        raise TruncatedFileError(
            f"file ends at byte {len(buf)} but {what} needs bytes {offset}..{offset + count}"
        )
    return buf[offset : offset + count]


def read_tensor(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if _take(buf, 0, 4, "magic") != MAGIC:
        raise BadMagicError(f"{path}: not a tensor file (magic {buf[:4]!r})")
    version = int.from_bytes(_take(buf, 4, 4, "version"), "little")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    dtype_code = _take(buf, 8, 1, "dtype code")[0]
    if dtype_code != DTYPE_FLOAT32:
        raise UnsupportedDtypeError(f"{path}: unknown dtype code {dtype_code}")
    ndim = _take(buf, 9, 1, "rank")[0]
    shape = []
    offset = 10
    for i in range(ndim):
        shape.append(int.from_bytes(_take(buf, offset, 8, f"dimension {i}"), "little"))
        offset += 8
    count = 1
    for dim in shape:
        count *= dim
    payload = _take(buf, offset, 4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
