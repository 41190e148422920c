"""Binary tensor container used for feature files and checkpoint entries.

Layout: magic "EDUT" | version u8 | dtype u8 (0 = float32, 1 = float64) |
ndim u8 | one u64 per dimension | payload, row-major. All integers and
floats are little-endian. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericalError, TruncatedFileError
from .tensor import Tensor

MAGIC = b"EDUT"
FORMAT_VERSION = 1
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
MAX_NDIM = 8


def to_bytes(t) -> bytes:
    """Serialize a Tensor or array to the container format."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    dtype = np.dtype(arr.dtype)
    if dtype not in DTYPE_CODES:
        raise FormatError(f"unsupported dtype {dtype}, expected float32/float64")
    if arr.ndim > MAX_NDIM:
        raise FormatError(f"rank {arr.ndim} exceeds the supported maximum {MAX_NDIM}")
    if any(d <= 0 for d in arr.shape):
        raise FormatError(f"dimensions must be positive, got {arr.shape}")
    header = MAGIC + struct.pack("<BBB", FORMAT_VERSION, DTYPE_CODES[dtype], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    le = dtype.newbyteorder("<")
    payload = np.ascontiguousarray(arr, dtype=le).tobytes(order="C")
    return header + dims + payload


def from_bytes(data: bytes) -> Tensor:
    """Parse the container format back into a Tensor."""
    if len(data) < 7:
        raise TruncatedFileError(
            f"header needs 7 bytes, got {len(data)}"
        )
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, dtype_code, ndim = struct.unpack("<BBB", data[4:7])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    if dtype_code not in CODE_DTYPES:
        raise FormatError(f"unknown dtype code {dtype_code}")
    if ndim > MAX_NDIM:
        raise FormatError(f"rank {ndim} exceeds the supported maximum {MAX_NDIM}")

    dims_end = 7 + 8 * ndim
    if len(data) < dims_end:
        raise TruncatedFileError(
            f"expected {dims_end} header bytes, got {len(data)}"
        )
    shape = struct.unpack(f"<{ndim}Q", data[7:dims_end]) if ndim else ()
    if any(d == 0 for d in shape):
        raise FormatError(f"dimensions must be positive, got {shape}")

    dtype = CODE_DTYPES[dtype_code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    expected = dims_end + count * dtype.itemsize
    if len(data) < expected:
        raise TruncatedFileError(
            f"expected {expected} bytes, got {len(data)}"
        )
    if len(data) > expected:
        raise FormatError(
            f"trailing bytes: expected {expected} bytes, got {len(data)}"
        )
    arr = np.frombuffer(data[dims_end:expected], dtype=dtype).reshape(shape)
    arr = arr.astype(dtype.newbyteorder("="), copy=True)
    try:
        return Tensor(arr)
    except NumericalError as exc:
        raise FormatError(f"payload contains non-finite values: {exc}") from exc


def write_tensor(path, t) -> None:
    Path(path).write_bytes(to_bytes(t))


def read_tensor(path) -> Tensor:
    p = Path(path)
    if not p.exists():
        raise FormatError(f"tensor file not found: {p}")
    return from_bytes(p.read_bytes())
