"""Uniform asymmetric group-wise integer quantization with packed codes.

Each group ``G`` gets a zero point ``min(G)`` and a step
``(max(G) - min(G)) / (2**b - 1)``; entries map to
``round((x - min) / step)`` with ties to even.  Constant groups get step 0
and all-zero codes, so they dequantize to the zero point exactly.

Codes are packed little-endian inside each byte (first code in the lowest
bits).  Per-token schemes pack in row-major order and per-channel schemes
in column-major order, which keeps every group in one contiguous span.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from gearkv.tensor import ShapeError, as_matrix

SUPPORTED_BITS = (2, 4, 8)
TOKEN = "token"
CHANNEL = "channel"


@dataclass(frozen=True)
class GroupingScheme:
    """Which axis groups run along, and how long they are.

    ``axis="token"`` groups contiguous channels inside one token row;
    ``axis="channel"`` groups contiguous tokens inside one channel column.
    ``group_size=None`` means one group per whole vector.
    """

    axis: str
    group_size: int | None = None

    def __post_init__(self):
        if self.axis not in (TOKEN, CHANNEL):
            raise ValueError(f"unknown grouping axis {self.axis!r}")
        if self.group_size is not None and self.group_size < 1:
            raise ValueError(f"group size must be >= 1, got {self.group_size}")

    @classmethod
    def per_token(cls, g: int) -> "GroupingScheme":
        return cls(TOKEN, g)

    @classmethod
    def per_channel(cls, g: int) -> "GroupingScheme":
        return cls(CHANNEL, g)

    @classmethod
    def per_token_vector(cls) -> "GroupingScheme":
        return cls(TOKEN, None)

    @classmethod
    def per_channel_vector(cls) -> "GroupingScheme":
        return cls(CHANNEL, None)

    @property
    def is_vector(self) -> bool:
        return self.group_size is None

    def grouped_extent(self, shape: tuple[int, int]) -> tuple[int, int]:
        """Return (grouped axis length, other axis length) for a matrix shape."""
        rows, cols = shape
        return (cols, rows) if self.axis == TOKEN else (rows, cols)

    def groups_per_vector(self, shape: tuple[int, int]) -> int:
        length, _ = self.grouped_extent(shape)
        if length == 0:
            return 0
        if self.group_size is None:
            return 1
        return math.ceil(length / self.group_size)

    def group_count(self, shape: tuple[int, int]) -> int:
        _, other = self.grouped_extent(shape)
        return self.groups_per_vector(shape) * other

    def label(self) -> str:
        size = "vec" if self.group_size is None else f"g{self.group_size}"
        return f"{self.axis}-{size}"


@dataclass(frozen=True)
class QuantizedTensor:
    codes: bytes
    scales: np.ndarray  # (vectors, groups_per_vector), float32
    zeros: np.ndarray
    scheme: GroupingScheme
    shape: tuple[int, int]
    bits: int

    @property
    def group_count(self) -> int:
        return int(self.scales.size)

    @property
    def entry_count(self) -> int:
        return self.shape[0] * self.shape[1]


def packed_length(count: int, bits: int) -> int:
    return (count * bits + 7) // 8


def pack_codes(codes, bits: int) -> bytes:
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"unsupported bit width {bits}")
    codes = np.asarray(codes, dtype=np.uint8).ravel()
    if codes.size and int(codes.max()) >= (1 << bits):
        raise ValueError(f"code out of range for {bits}-bit packing")
    per_byte = 8 // bits
    pad = (-codes.size) % per_byte
    if pad:
        codes = np.concatenate([codes, np.zeros(pad, dtype=np.uint8)])
    lanes = codes.reshape(-1, per_byte).astype(np.uint16)
    shifts = (np.arange(per_byte, dtype=np.uint16) * bits)[None, :]
    return (lanes << shifts).sum(axis=1).astype(np.uint8).tobytes()


def unpack_codes(buf: bytes, bits: int, count: int) -> np.ndarray:
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"unsupported bit width {bits}")
    if len(buf) != packed_length(count, bits):
        raise ValueError(
            f"corrupted packed payload: {len(buf)} bytes for {count} {bits}-bit codes"
        )
    per_byte = 8 // bits
    raw = np.frombuffer(buf, dtype=np.uint8)
    shifts = (np.arange(per_byte, dtype=np.uint8) * bits)[None, :]
    mask = np.uint8((1 << bits) - 1)
    out = (raw[:, None] >> shifts) & mask
    return out.ravel()[:count]


def _vectors(x: np.ndarray, scheme: GroupingScheme) -> np.ndarray:
    # rows of the returned view are the vectors groups live in
    return x if scheme.axis == TOKEN else x.T


def _group_starts(length: int, scheme: GroupingScheme) -> np.ndarray:
    g = length if scheme.group_size is None else scheme.group_size
    return np.arange(0, length, g)


def _expand(per_group: np.ndarray, starts: np.ndarray, length: int) -> np.ndarray:
    sizes = np.diff(np.append(starts, length))
    return np.repeat(per_group, sizes, axis=1)


def quantize(x, bits: int, scheme: GroupingScheme) -> QuantizedTensor:
    """Quantize a dense matrix group-wise to ``bits``-bit unsigned codes."""
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"unsupported bit width {bits}; expected one of {SUPPORTED_BITS}")
    if not isinstance(scheme, GroupingScheme):
        raise TypeError("scheme must be a GroupingScheme")
    x = as_matrix(x)
    vecs = _vectors(x, scheme)
    nvec, length = vecs.shape
    if vecs.size == 0:
        empty = np.zeros((nvec, 0), dtype=np.float32)
        return QuantizedTensor(b"", empty, empty.copy(), scheme, x.shape, bits)

    starts = _group_starts(length, scheme)
    lo = np.minimum.reduceat(vecs, starts, axis=1)
    hi = np.maximum.reduceat(vecs, starts, axis=1)
    qmax = (1 << bits) - 1
    scales = ((hi.astype(np.float64) - lo.astype(np.float64)) / qmax).astype(np.float32)
    zeros = lo.astype(np.float32)

    step = _expand(scales, starts, length).astype(np.float64)
    base = _expand(zeros, starts, length).astype(np.float64)
    live = step > 0
    ratio = np.divide(vecs.astype(np.float64) - base, step, out=np.zeros_like(step), where=live)
    codes = np.clip(np.rint(ratio), 0, qmax).astype(np.uint8)
    codes[~live] = 0
    return QuantizedTensor(pack_codes(codes, bits), scales, zeros, scheme, x.shape, bits)


def unpacked_codes(q: QuantizedTensor) -> np.ndarray:
    """Codes laid out like the source matrix, shape ``q.shape``."""
    rows, cols = q.shape
    flat = unpack_codes(q.codes, q.bits, rows * cols)
    if q.scheme.axis == TOKEN:
        return flat.reshape(rows, cols)
    return flat.reshape(cols, rows).T


def dequantize(q: QuantizedTensor) -> np.ndarray:
    rows, cols = q.shape
    flat = unpack_codes(q.codes, q.bits, rows * cols)
    vec_shape = (rows, cols) if q.scheme.axis == TOKEN else (cols, rows)
    codes = flat.reshape(vec_shape)
    if codes.size == 0:
        return np.zeros(q.shape, dtype=np.float32)
    nvec, length = vec_shape
    starts = _group_starts(length, q.scheme)
    if q.scales.shape != (nvec, starts.size) or q.zeros.shape != q.scales.shape:
        raise ValueError("scale/zero arrays do not match the grouping scheme")
    step = _expand(q.scales, starts, length).astype(np.float64)
    base = _expand(q.zeros, starts, length).astype(np.float64)
    out = (base + codes.astype(np.float64) * step).astype(np.float32)
    if q.scheme.axis == CHANNEL:
        out = out.T
    return np.ascontiguousarray(out)


def group_steps(q: QuantizedTensor) -> np.ndarray:
    """Per-entry quantization step, laid out like the source matrix."""
    rows, cols = q.shape
    vec_shape = (rows, cols) if q.scheme.axis == TOKEN else (cols, rows)
    if rows * cols == 0:
        return np.zeros(q.shape, dtype=np.float32)
    starts = _group_starts(vec_shape[1], q.scheme)
    step = _expand(q.scales, starts, vec_shape[1])
    return step if q.scheme.axis == TOKEN else step.T
