"""Little-endian "TNSR" records: magic, u32 version, u32 rank, u64 extents, f64 payload."""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import Tensor

MAGIC = b"TNSR"
VERSION = 1


class ParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f8", order="C")  # keeps rank 0, unlike ascontiguousarray
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def decode_array(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns (array, next offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise ParseError("bad TNSR magic", offset)
    if len(buf) < offset + 12:
        raise ParseError("truncated TNSR header", offset)
    version, rank = struct.unpack_from("<II", buf, offset + 4)
    if version != VERSION:
        raise ParseError(f"unsupported TNSR version {version}", offset + 4)
    pos = offset + 12
    if len(buf) < pos + 8 * rank:
        raise ParseError("truncated TNSR extents", pos)
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    end = pos + 8 * count
    if len(buf) < end:
        raise ParseError(f"truncated TNSR payload: need {8 * count} bytes", pos)
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
    return arr, end


def save_tensor(path, t: Tensor | np.ndarray) -> None:
    data = t.data if isinstance(t, Tensor) else t
    with open(path, "wb") as fh:
        fh.write(encode_array(data))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = decode_array(buf)
    if end != len(buf):
        raise ParseError("trailing bytes after TNSR record", end)
    return Tensor(arr)
