"""Block compression: outlier carve-out, quantized backbone, low-rank residual.

For a block ``X`` the compressor computes, in order::

    S   = top/bottom outliers of X (per channel for Keys, per token for Values)
    D   = quantize(X - S)
    R   = X - dequantize(D) - S
    L_h = power-iteration factors of R's head-h columns

and reconstructs ``dequantize(D) + L + S``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction

import numpy as np

from gearkv.lowrank import LowRankFactors, solve_heads
from gearkv.outliers import CHANNEL, TOKEN, SparseOutliers, filter_outliers
from gearkv.quant import SUPPORTED_BITS, GroupingScheme, QuantizedTensor, dequantize, quantize
from gearkv.tensor import HeadLayout, ShapeError, as_matrix, frobenius_error

KEY = "key"
VALUE = "value"
ROLES = (KEY, VALUE)
PASSTHROUGH_BITS = 16


class ConfigError(ValueError):
    pass


class FlushThresholdError(ConfigError):
    pass


@dataclass(frozen=True)
class GearConfig:
    bits: int = 2
    sparsity: float = 2.0
    rank_prefill: int = 4
    rank_decode: int = 2
    buffer_size: int = 64
    key_scheme: GroupingScheme = field(default_factory=lambda: GroupingScheme.per_channel(64))
    value_scheme: GroupingScheme = field(default_factory=lambda: GroupingScheme.per_token(64))
    iters: int = 2
    seed: int = 0
    coverage: float = 100.0
    key_outlier_axis: str = CHANNEL
    value_outlier_axis: str = TOKEN

    @property
    def passthrough(self) -> bool:
        return self.bits == PASSTHROUGH_BITS

    def scheme_for(self, role: str) -> GroupingScheme:
        return self.key_scheme if _role(role) == KEY else self.value_scheme

    def outlier_axis_for(self, role: str) -> str:
        return self.key_outlier_axis if _role(role) == KEY else self.value_outlier_axis

    def validate(self) -> "GearConfig":
        if self.bits not in SUPPORTED_BITS + (PASSTHROUGH_BITS,):
            raise ConfigError(f"bit width {self.bits} not in {SUPPORTED_BITS + (PASSTHROUGH_BITS,)}")
        if not 0 <= self.sparsity <= 100:
            raise ConfigError(f"sparsity {self.sparsity} outside [0, 100]")
        if self.rank_prefill < 0 or self.rank_decode < 0:
            raise ConfigError("ranks must be >= 0")
        if self.buffer_size < 1:
            raise ConfigError("buffer size must be >= 1")
        if self.iters < 1:
            raise ConfigError("power iterations must be >= 1")
        if not 0 <= self.coverage <= 100:
            raise ConfigError(f"coverage {self.coverage} outside [0, 100]")
        for axis in (self.key_outlier_axis, self.value_outlier_axis):
            if axis not in (CHANNEL, TOKEN):
                raise ConfigError(f"unknown outlier axis {axis!r}")
        if not self.passthrough:
            for scheme in (self.key_scheme, self.value_scheme):
                # token-sliced groups must close exactly at every flush
                if scheme.axis == CHANNEL and scheme.group_size is not None \
                        and self.buffer_size % scheme.group_size:
                    raise FlushThresholdError(
                        f"flush threshold violation: buffer {self.buffer_size} is not a multiple "
                        f"of per-channel group size {scheme.group_size}"
                    )
        return self

    def with_(self, **changes) -> "GearConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["key_scheme"] = self.key_scheme.label()
        out["value_scheme"] = self.value_scheme.label()
        return out


def _role(role: str) -> str:
    if role not in ROLES:
        raise ValueError(f"role must be one of {ROLES}, got {role!r}")
    return role


@dataclass(frozen=True)
class CompressedBlock:
    role: str
    start: int
    rows: int
    cols: int
    backbone: QuantizedTensor | None
    outliers: SparseOutliers
    lowrank: LowRankFactors
    raw: np.ndarray | None = None  # passthrough payload

    @property
    def token_range(self) -> tuple[int, int]:
        return self.start, self.start + self.rows

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    def backbone_dense(self) -> np.ndarray:
        if self.raw is not None:
            return self.raw
        return dequantize(self.backbone)


def coverage_offset(rows: int, coverage: float) -> int:
    """First row receiving low-rank correction when only the newest p% are covered."""
    covered = math.ceil(Fraction(str(coverage)) * rows / 100)
    return rows - min(rows, covered)


def compress_block(x, cfg: GearConfig, role: str, rank: int, layout: HeadLayout | None = None,
                   *, coverage: float = 100.0, start: int = 0) -> CompressedBlock:
    """Compress one Key or Value block.

    ``rank`` is the per-head low-rank budget (0 disables the low-rank term);
    ``coverage`` restricts the low-rank fit to the newest ``coverage`` percent
    of rows.
    """
    role = _role(role)
    x = as_matrix(x)
    n, d = x.shape
    if n == 0:
        raise ShapeError("cannot compress an empty block")
    layout = layout or HeadLayout(1, d)
    if layout.width != d:
        raise ShapeError(f"layout width {layout.width} does not match {d} channels")
    axis = cfg.outlier_axis_for(role)

    if cfg.passthrough:
        return CompressedBlock(role, start, n, d, None, SparseOutliers.empty(x.shape, axis),
                               LowRankFactors.empty(n, layout), raw=x.copy())

    outliers, remainder = filter_outliers(x, cfg.sparsity, axis)
    backbone = quantize(remainder, cfg.bits, cfg.scheme_for(role))
    if rank == 0:
        return CompressedBlock(role, start, n, d, backbone, outliers, LowRankFactors.empty(n, layout))

    # x - S equals the remainder exactly, so R = remainder - dequant(D)
    residual = remainder.astype(np.float64) - dequantize(backbone)
    offset = coverage_offset(n, coverage)
    lowrank = solve_heads(residual, layout, rank, cfg.iters, seed=(cfg.seed, ROLES.index(role)),
                          row_offset=offset)
    return CompressedBlock(role, start, n, d, backbone, outliers, lowrank)


def reconstruct_block(block: CompressedBlock) -> np.ndarray:
    base = block.backbone_dense()
    if base.shape != block.shape or block.outliers.shape != block.shape:
        raise ShapeError("block components disagree on shape")
    if block.lowrank.rows != block.rows or block.lowrank.layout.width != block.cols:
        raise ShapeError("low-rank factors disagree with block shape")
    out = base.copy()
    if not block.lowrank.is_empty:
        out += block.lowrank.to_dense()
    if block.outliers.nnz:
        out[block.outliers.rows, block.outliers.cols] += block.outliers.values
    return out


@dataclass(frozen=True)
class ErrorReport:
    frobenius: float
    relative: float
    max_abs: float
    share_backbone: float
    share_lowrank: float
    share_outliers: float

    FIELDS = ("frobenius", "relative", "max_abs", "share_backbone", "share_lowrank", "share_outliers")

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.FIELDS}


def error_report(x, block: CompressedBlock) -> ErrorReport:
    x = np.asarray(x, dtype=np.float32)
    if x.shape != block.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs block {block.shape}")
    approx = reconstruct_block(block)
    err = frobenius_error(x, approx)
    norm = float(np.linalg.norm(x.astype(np.float64)))
    rel = err / norm if norm > 0 else (0.0 if err == 0 else math.inf)
    max_abs = float(np.max(np.abs(x.astype(np.float64) - approx))) if x.size else 0.0

    energies = [
        float(np.sum(np.square(block.backbone_dense(), dtype=np.float64))),
        float(np.sum(np.square(block.lowrank.to_dense(), dtype=np.float64))) if not block.lowrank.is_empty else 0.0,
        float(np.sum(np.square(block.outliers.values, dtype=np.float64))),
    ]
    total = sum(energies)
    shares = [e / total if total > 0 else 0.0 for e in energies]
    return ErrorReport(err, rel, max_abs, *shares)
