"""NDT1 binary tensor format.

Layout (little-endian throughout):
    magic   4 bytes  b"NDT1"
    dtype   1 byte   0 = float32, 1 = float64, 2 = uint8 (label maps)
    ndim    1 byte
    extents ndim * uint32
    payload raw row-major values

Round-trips are bit-exact; any size mismatch is rejected as corruption
rather than zero-filled.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"NDT1"

_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}


def dumps(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > 0:
        arr = np.ascontiguousarray(arr)
    code = _DTYPE_TO_CODE.get(arr.dtype)
    if code is None:
        raise DataError(f"unsupported dtype for NDT1: {arr.dtype}")
    if arr.ndim > 255:
        raise DataError("NDT1 supports at most 255 dimensions")
    header = MAGIC + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype(_CODE_TO_DTYPE[code], copy=False).tobytes(order="C")
    return header + payload


def loads(buf: bytes, *, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise DataError(f"{source}: not an NDT1 blob (bad magic)")
    code, ndim = struct.unpack_from("<BB", buf, 4)
    if code not in _CODE_TO_DTYPE:
        raise DataError(f"{source}: unknown dtype code {code}")
    offset = 6
    if len(buf) < offset + 4 * ndim:
        raise DataError(f"{source}: truncated header")
    shape = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    dtype = _CODE_TO_DTYPE[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - offset != expected:
        raise DataError(
            f"{source}: payload size {len(buf) - offset} does not match "
            f"shape {tuple(shape)} ({expected} bytes expected)"
        )
    arr = np.frombuffer(buf, dtype=dtype, count=-1, offset=offset).reshape(shape)
    # native byte order, writable copy
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write_ndt(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(dumps(arr))


def read_ndt(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"missing NDT1 file: {path}") from exc
    return loads(buf, source=str(path))
