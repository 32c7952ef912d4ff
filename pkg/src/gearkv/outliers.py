"""Per-vector outlier extraction into a coordinate-format sparse matrix."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from gearkv.tensor import ShapeError, as_matrix

TOKEN = "token"
CHANNEL = "channel"


@dataclass(frozen=True)
class SparseOutliers:
    """Extracted entries as (row, col, value) triplets sorted by (row, col)."""

    rows: np.ndarray  # int64
    cols: np.ndarray
    values: np.ndarray  # float32
    shape: tuple[int, int]
    axis: str

    @classmethod
    def empty(cls, shape: tuple[int, int], axis: str = CHANNEL) -> "SparseOutliers":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), np.zeros(0, dtype=np.float32), tuple(shape), axis)

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=np.float32)
        out[self.rows, self.cols] = self.values
        return out

    def entries(self) -> list[tuple[int, int, float]]:
        return [(int(r), int(c), float(v)) for r, c, v in zip(self.rows, self.cols, self.values)]


def extraction_count(sparsity: float, length: int) -> int:
    """Entries taken from each end of a vector of ``length``: floor(s% * len / 2)."""
    return math.floor(Fraction(str(sparsity)) * length / 200)


def filter_outliers(x, sparsity: float, axis: str) -> tuple[SparseOutliers, np.ndarray]:
    """Move the k largest and k smallest entries of every vector into a sparse matrix.

    ``axis="channel"`` treats each column as a vector (Keys), ``axis="token"``
    each row (Values).  Ties go to the smallest index along the vector.  The
    returned remainder holds zeros at the extracted positions, so
    ``outliers.to_dense() + remainder == x`` exactly.
    """
    if axis not in (TOKEN, CHANNEL):
        raise ValueError(f"unknown outlier axis {axis!r}")
    if not 0 <= sparsity <= 100:
        raise ValueError(f"sparsity must be in [0, 100], got {sparsity}")
    x = as_matrix(x)
    vecs = x if axis == TOKEN else x.T
    nvec, length = vecs.shape
    k = extraction_count(sparsity, length)
    if k == 0 or nvec == 0:
        return SparseOutliers.empty(x.shape, axis), x.copy()

    top = np.argsort(-vecs, axis=1, kind="stable")[:, :k]
    masked = vecs.astype(np.float64)
    np.put_along_axis(masked, top, np.inf, axis=1)
    bottom = np.argsort(masked, axis=1, kind="stable")[:, :k]
    picked = np.concatenate([top, bottom], axis=1)

    vec_idx = np.repeat(np.arange(nvec), 2 * k)
    pos_idx = picked.ravel()
    if axis == TOKEN:
        r, c = vec_idx, pos_idx
    else:
        r, c = pos_idx, vec_idx
    order = np.lexsort((c, r))
    r = r[order].astype(np.int64)
    c = c[order].astype(np.int64)
    vals = x[r, c].copy()

    remainder = x.copy()
    remainder[r, c] = 0.0
    return SparseOutliers(r, c, vals, x.shape, axis), remainder


def validate_outliers(s: SparseOutliers) -> None:
    rows, cols = s.shape
    if s.nnz:
        if s.rows.min() < 0 or s.rows.max() >= rows or s.cols.min() < 0 or s.cols.max() >= cols:
            raise ShapeError("outlier index out of range")
        flat = s.rows * cols + s.cols
        if np.unique(flat).size != flat.size:
            raise ShapeError("duplicate outlier coordinates")
