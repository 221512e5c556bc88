"""Reader/writer for the IDX container used by the MNIST distribution.

Layout (all integers big-endian)::

    offset 0   2 zero bytes
    offset 2   1 byte  element type (0x08 ubyte, 0x09 sbyte, 0x0B int16,
                                     0x0C int32, 0x0D float32, 0x0E float64)
    offset 3   1 byte  number of dimensions k
    offset 4   k x uint32 dimension sizes
    offset 4+4k  payload, C order

so label files start ``00 00 08 01`` (0x00000801) and image files
``00 00 08 03`` (0x00000803).
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

_DTYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_CODES = {dt.newbyteorder("=").str[1:]: code for code, dt in _DTYPES.items()}


class IdxParseError(ValueError):
    """Malformed IDX data; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def parse_idx(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise IdxParseError("truncated magic number", len(buf))
    if buf[0] != 0 or buf[1] != 0:
        raise IdxParseError(f"bad magic number 0x{buf[:4].hex()}", 0)
    code, ndim = buf[2], buf[3]
    if code not in _DTYPES:
        raise IdxParseError(f"unknown element type 0x{code:02x}", 2)
    if ndim == 0:
        raise IdxParseError("zero dimensions", 3)
    header_end = 4 + 4 * ndim
    if len(buf) < header_end:
        raise IdxParseError(f"truncated header: need {header_end} bytes, have {len(buf)}", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header_end])
    dtype = _DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = len(buf) - header_end
    if payload < expected:
        raise IdxParseError(
            f"truncated payload: expected {expected} bytes for shape {dims}, found {payload}", len(buf)
        )
    if payload > expected:
        raise IdxParseError(f"{payload - expected} trailing bytes after payload", header_end + expected)
    arr = np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims)), offset=header_end)
    return arr.reshape(dims).astype(dtype.newbyteorder("="))


def read_idx(path) -> np.ndarray:
    return parse_idx(Path(path).read_bytes())


def encode_idx(arr) -> bytes:
    arr = np.asarray(arr)
    key = arr.dtype.newbyteorder("=").str[1:]
    if key not in _CODES:
        raise ValueError(f"dtype {arr.dtype} has no IDX element type")
    code = _CODES[key]
    header = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr.astype(_DTYPES[code])).tobytes()


def write_idx(path, arr) -> Path:
    path = Path(path)
    path.write_bytes(encode_idx(arr))
    return path
