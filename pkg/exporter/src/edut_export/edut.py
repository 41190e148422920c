"""Write-only encoder for the EDUT tensor container.

Layout: magic "EDUT" | version u8 | dtype u8 (0 = float32, 1 = float64) |
ndim u8 | dims as u64 little-endian | row-major little-endian payload.

This encoder is deliberately independent of any reader implementation;
conformance is checked by decoding the emitted bytes with the consumer's
own reader in the tests.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import ExportError

MAGIC = b"EDUT"
FORMAT_VERSION = 1
DTYPE_CODES = {"float32": 0, "float64": 1}
MAX_NDIM = 8


def encode_tensor(arr: np.ndarray) -> bytes:
    """Serialize an array, refusing anything the container cannot express."""
    arr = np.asarray(arr)
    code = DTYPE_CODES.get(arr.dtype.name)
    if code is None:
        raise ExportError(f"dtype {arr.dtype.name} not representable (f32/f64 only)")
    if arr.ndim > MAX_NDIM:
        raise ExportError(f"rank {arr.ndim} exceeds the maximum of {MAX_NDIM}")
    if any(d <= 0 for d in arr.shape):
        raise ExportError(f"zero-sized dimension in shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ExportError("refusing to serialize non-finite feature values")
    header = MAGIC + bytes([FORMAT_VERSION, code, arr.ndim])
    header += b"".join(struct.pack("<Q", d) for d in arr.shape)
    little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return header + np.ascontiguousarray(little).tobytes(order="C")


def write_bytes_atomic(path, blob: bytes) -> None:
    """Write fully or not at all: dump to a sibling temp, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        tmp.write_bytes(blob)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_tensor_atomic(path, arr: np.ndarray) -> None:
    """Encode, then write fully or not at all."""
    write_bytes_atomic(path, encode_tensor(arr))
