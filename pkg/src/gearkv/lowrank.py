"""Head-wise rank-r approximation by power iteration with Householder QR."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from gearkv.tensor import HeadLayout, ShapeError, split_heads


class RankClampWarning(UserWarning):
    pass


def householder_qr(m) -> tuple[np.ndarray, np.ndarray]:
    """Reduced QR of a tall matrix via Householder reflections.

    Signs are fixed so that ``R`` has a nonnegative diagonal.
    """
    a = np.array(m, dtype=np.float64)
    rows, cols = a.shape
    if cols > rows:
        raise ShapeError(f"reduced QR needs rows >= cols, got {a.shape}")
    reflectors = []
    for j in range(cols):
        x = a[j:, j]
        normx = np.linalg.norm(x)
        if normx == 0.0:
            reflectors.append(None)
            continue
        v = x.copy()
        v[0] += normx if x[0] >= 0 else -normx
        v /= np.linalg.norm(v)
        a[j:, j:] -= 2.0 * np.outer(v, v @ a[j:, j:])
        reflectors.append(v)

    q = np.eye(rows, cols)
    for j in range(cols - 1, -1, -1):
        v = reflectors[j]
        if v is not None:
            q[j:, :] -= 2.0 * np.outer(v, v @ q[j:, :])
    r = np.triu(a[:cols, :])
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return q * signs, r * signs[:, None]


def orthonormalize(m, *, return_deficient: bool = False):
    """Orthonormal basis for the column space of ``m`` (same shape as ``m``).

    Columns whose QR pivot is negligible are zeroed instead of raising; pass
    ``return_deficient=True`` to also get the list of zeroed column indices.
    """
    m = np.asarray(m, dtype=np.float64)
    rows, cols = m.shape
    if cols == 0:
        q, deficient = np.zeros((rows, 0)), []
    else:
        q, r = householder_qr(m)
        pivots = np.abs(np.diag(r))
        tol = max(rows, cols) * np.finfo(np.float32).eps * (pivots.max() if pivots.size else 0.0)
        deficient = [j for j in range(cols) if pivots[j] <= tol]
        if deficient:
            q[:, deficient] = 0.0
    if return_deficient:
        return q, deficient
    return q


@dataclass(frozen=True)
class LowRankFactors:
    """Per-head factor pairs; head ``h`` contributes ``a[h] @ b[h].T``.

    ``a[h]`` only covers rows ``row_offset:rows`` of the block; earlier rows
    get no low-rank correction.
    """

    a: tuple[np.ndarray, ...]
    b: tuple[np.ndarray, ...]
    rank: int
    layout: HeadLayout
    rows: int
    row_offset: int = 0
    clamped: bool = False
    deficient: bool = False

    @classmethod
    def empty(cls, rows: int, layout: HeadLayout) -> "LowRankFactors":
        a = tuple(np.zeros((0, 0), dtype=np.float32) for _ in range(layout.head_count))
        b = tuple(np.zeros((layout.head_dim, 0), dtype=np.float32) for _ in range(layout.head_count))
        return cls(a, b, 0, layout, rows, rows)

    @property
    def is_empty(self) -> bool:
        return self.rank == 0

    @property
    def covered_rows(self) -> int:
        return self.rows - self.row_offset

    @property
    def parameter_count(self) -> int:
        return sum(a.size + b.size for a, b in zip(self.a, self.b))

    def head_matrix(self, h: int) -> np.ndarray:
        out = np.zeros((self.rows, self.layout.head_dim), dtype=np.float32)
        if self.rank:
            prod = self.a[h].astype(np.float64) @ self.b[h].astype(np.float64).T
            out[self.row_offset:] = prod.astype(np.float32)
        return out

    def to_dense(self) -> np.ndarray:
        return np.concatenate([self.head_matrix(h) for h in range(self.layout.head_count)], axis=1)


def _factorize(x: np.ndarray, rank: int, iters: int, entropy: Sequence[int]):
    rng = np.random.default_rng(list(entropy))
    b = rng.standard_normal((x.shape[1], rank))
    deficient = False
    for step in range(iters):
        last = step == iters - 1
        if last:
            b, bad = orthonormalize(b, return_deficient=True)
            deficient |= bool(bad)
        a = x @ b
        if last:
            a, bad = orthonormalize(a, return_deficient=True)
            deficient |= bool(bad)
        b = x.T @ a
    return a.astype(np.float32), b.astype(np.float32), deficient


def _seed_entropy(seed: int | Sequence[int]) -> list[int]:
    return [int(seed)] if np.isscalar(seed) else [int(s) for s in seed]


def _clamp_rank(rank: int, rows: int, cols: int) -> tuple[int, bool]:
    if rank < 0:
        raise ValueError(f"rank must be >= 0, got {rank}")
    limit = min(rows, cols)
    if rank > limit:
        warnings.warn(f"rank {rank} clamped to {limit}", RankClampWarning, stacklevel=3)
        return limit, True
    return rank, False


def power_iteration_svd(r, rank: int, iters: int = 2, seed: int | Sequence[int] = 0,
                        *, head: int = 0) -> LowRankFactors:
    """Rank-``rank`` factors ``(A, B)`` of a single-head matrix with ``A B^T ~ r``.

    Runs ``iters`` rounds of ``A = R B; B = R^T A`` from a seeded Gaussian
    ``B``, orthonormalizing ``B`` and then ``A`` in the last round only.
    """
    if iters < 1:
        raise ValueError("power iteration needs at least one round")
    x = np.asarray(r, dtype=np.float64)
    n, d = x.shape
    layout = HeadLayout(1, d)
    rank, clamped = _clamp_rank(rank, n, d)
    if rank == 0:
        return LowRankFactors.empty(n, layout)
    a, b, deficient = _factorize(x, rank, iters, [*_seed_entropy(seed), head])
    return LowRankFactors((a,), (b,), rank, layout, n, 0, clamped, deficient)


def solve_heads(r, layout: HeadLayout, rank: int, iters: int = 2, seed: int | Sequence[int] = 0,
                *, row_offset: int = 0) -> LowRankFactors:
    """Independent power-iteration factors for every head slice of ``r``.

    Only rows ``row_offset:`` enter the solver; rows above it are left
    uncorrected.
    """
    if iters < 1:
        raise ValueError("power iteration needs at least one round")
    heads = split_heads(r, layout)
    n = heads[0].shape[0]
    if not 0 <= row_offset <= n:
        raise ValueError(f"row offset {row_offset} outside [0, {n}]")
    covered = n - row_offset
    rank, clamped = _clamp_rank(rank, covered, layout.head_dim)
    if rank == 0:
        return LowRankFactors.empty(n, layout)
    entropy = _seed_entropy(seed)
    a_list, b_list, deficient = [], [], False
    for h, rh in enumerate(heads):
        a, b, bad = _factorize(rh[row_offset:].astype(np.float64), rank, iters, [*entropy, h])
        a_list.append(a)
        b_list.append(b)
        deficient |= bad
    return LowRankFactors(tuple(a_list), tuple(b_list), rank, layout, n, row_offset, clamped, deficient)
