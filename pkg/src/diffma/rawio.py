"""Little-endian raw tensor files.

Layout::

    offset  size       field
    0       4          magic b"DMRT"
    4       1          dtype code (1 float32, 2 float64, 3 uint8, 4 int64)
    5       1          ndim
    6       2          reserved, zero
    8       4 * ndim   shape, uint32 little-endian
    ...                C-order payload, little-endian
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DMRT"
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1"), 4: np.dtype("<i8")}
CODE_OF = {dt: code for code, dt in DTYPE_CODES.items()}


def write_tensor(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    dt = arr.dtype.newbyteorder("<")
    try:
        code = CODE_OF[dt]
    except KeyError:
        raise ValueError(f"unsupported dtype {arr.dtype}") from None
    header = MAGIC + struct.pack("<BBH", code, arr.ndim, 0) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    code, ndim, _ = struct.unpack_from("<BBH", data, 4)
    if code not in DTYPE_CODES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    shape = struct.unpack_from(f"<{ndim}I", data, 8)
    dt = DTYPE_CODES[code]
    offset = 8 + 4 * ndim
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(data) - offset != expected:
        raise ValueError(f"{path}: payload is {len(data) - offset} bytes, expected {expected}")
    return np.frombuffer(data, dtype=dt, offset=offset).reshape(shape).astype(dt.newbyteorder("="))
