"""CGT1 raw tensor container.

Layout (all integers little-endian)::

    b"CGT1" | u8 dtype | u8 rank | rank x u32 extent | row-major payload

dtype codes: 1 = float32, 2 = uint8 (label grids), 3 = float64 (model state).
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"CGT1"
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("u1"), 3: np.dtype("<f8")}
CODES = {np.dtype("float32"): 1, np.dtype("uint8"): 2, np.dtype("float64"): 3}


class TensorFileError(ValueError):
    pass


class BadMagicError(TensorFileError):
    pass


class UnknownDtypeError(TensorFileError):
    pass


class TruncatedFileError(TensorFileError):
    pass


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = CODES.get(arr.dtype)
    if code is None:
        raise UnknownDtypeError(f"cannot store dtype {arr.dtype}; use float32, float64 or uint8")
    if arr.ndim > 255:
        raise TensorFileError(f"rank {arr.ndim} exceeds 255")
    if any(e >= 2 ** 32 for e in arr.shape):
        raise TensorFileError(f"extent too large in shape {arr.shape}")
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 6:
        raise TruncatedFileError(f"{source}: header truncated ({len(buf)} bytes)")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"{source}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    code, rank = buf[4], buf[5]
    if code not in DTYPES:
        raise UnknownDtypeError(f"{source}: unknown dtype code {code}")
    end = 6 + 4 * rank
    if len(buf) < end:
        raise TruncatedFileError(f"{source}: extents truncated")
    shape = struct.unpack(f"<{rank}I", buf[6:end])
    dtype = DTYPES[code]
    n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) < end + n_bytes:
        raise TruncatedFileError(f"{source}: payload has {len(buf) - end} of {n_bytes} bytes")
    if len(buf) > end + n_bytes:
        raise TensorFileError(f"{source}: {len(buf) - end - n_bytes} trailing bytes")
    arr = np.frombuffer(buf, dtype=dtype, count=n_bytes // dtype.itemsize, offset=end)
    return arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor_file(arr: np.ndarray, path) -> None:
    atomic_write_bytes(path, encode_tensor(arr))


def read_tensor_file(path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"tensor file not found: {path}") from None
    return decode_tensor(data, str(path))
