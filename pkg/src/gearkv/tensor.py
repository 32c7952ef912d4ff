"""Dense matrices, head views, error metrics and the KVT1 tensor file format.

A dense matrix is a C-contiguous ``float32`` numpy array of shape
``(tokens, channels)``.  Everything else in the package consumes that shape.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from os import PathLike
from typing import Sequence

import numpy as np

MAGIC = b"KVT1"
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sIIB3x")
# element count must fit the u32 header fields and keep payloads addressable
MAX_ELEMENTS = 2**32 - 1


class ShapeError(ValueError):
    pass


class TensorFormatError(ValueError):
    pass


def as_matrix(x, *, name: str = "X") -> np.ndarray:
    """Validate ``x`` as a dense matrix and return it as contiguous float32."""
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[1] < 1:
        raise ShapeError(f"{name} must have at least one column")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class HeadLayout:
    head_count: int
    head_dim: int

    def __post_init__(self):
        if self.head_count < 1 or self.head_dim < 1:
            raise ShapeError(f"invalid head layout {self.head_count}x{self.head_dim}")

    @property
    def width(self) -> int:
        return self.head_count * self.head_dim

    @classmethod
    def for_width(cls, d: int, heads: int) -> "HeadLayout":
        if heads < 1 or d % heads:
            raise ShapeError(f"{heads} heads do not divide {d} channels")
        return cls(heads, d // heads)

    def head_slice(self, h: int) -> slice:
        return slice(h * self.head_dim, (h + 1) * self.head_dim)


def split_heads(x, layout: HeadLayout) -> list[np.ndarray]:
    """Split columns into ``layout.head_count`` contiguous per-head matrices."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != layout.width:
        raise ShapeError(
            f"matrix with shape {x.shape} does not match {layout.head_count} heads of {layout.head_dim}"
        )
    return [np.ascontiguousarray(x[:, layout.head_slice(h)]) for h in range(layout.head_count)]


def concat_heads(heads: Sequence[np.ndarray]) -> np.ndarray:
    return np.ascontiguousarray(np.concatenate(list(heads), axis=1))


def frobenius_error(x, y) -> float:
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}")
    diff = x.astype(np.float64) - y.astype(np.float64)
    return float(np.sqrt(np.sum(diff * diff)))


def encode_tensor(x) -> bytes:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise ShapeError(f"expected 2-D matrix, got shape {x.shape}")
    rows, cols = x.shape
    if rows > 0xFFFFFFFF or cols > 0xFFFFFFFF or rows * cols > MAX_ELEMENTS:
        raise TensorFormatError("dimension overflow")
    return _HEADER.pack(MAGIC, rows, cols, DTYPE_F32) + x.astype("<f4").tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise TensorFormatError("truncated header")
    magic, rows, cols, dtype = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    if dtype != DTYPE_F32:
        raise TensorFormatError(f"unsupported dtype tag {dtype}")
    if cols < 1:
        raise TensorFormatError("zero column count")
    if rows * cols > MAX_ELEMENTS:
        raise TensorFormatError("dimension overflow")
    need = _HEADER.size + 4 * rows * cols
    if len(buf) < need:
        raise TensorFormatError(f"truncated payload: need {need} bytes, have {len(buf)}")
    if len(buf) > need:
        raise TensorFormatError(f"trailing bytes after payload ({len(buf) - need})")
    values = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=_HEADER.size)
    return values.astype(np.float32).reshape(rows, cols)


def save_tensor(x, path: str | PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(x))


def load_tensor(path: str | PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())
