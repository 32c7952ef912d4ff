"""Closed-form and live-state byte accounting of a compressed KV cache.

Both paths price the same components at 16-bit storage:

* packed codes: ``ceil(rows * cols * b / 8)`` bytes per block and role
* scale and zero point: 2 bytes each per quantization group
* outliers: one 16-bit value plus two ``index_bits`` indices per entry
* low-rank factors: ``(covered_rows + d_H) * r`` 16-bit values per head
* buffer: raw 16-bit rows for both Keys and Values

Percentages are relative to a plain FP16 cache holding every token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from gearkv.cache import KVCacheState
from gearkv.gear import KEY, ROLES, CompressedBlock, GearConfig, coverage_offset
from gearkv.outliers import CHANNEL, extraction_count
from gearkv.quant import packed_length
from gearkv.tensor import HeadLayout

FP16_BYTES = 2


@dataclass(frozen=True)
class MemoryReport:
    codes: int
    scales_zeros: int
    sparse_values: int
    sparse_indices: int
    lowrank: int
    buffer: int
    baseline: int  # FP16 bytes of the same tokens, K and V

    FIELDS = ("codes", "scales_zeros", "sparse_values", "sparse_indices", "lowrank", "buffer",
              "total", "baseline", "percent_of_fp16")

    @property
    def total(self) -> int:
        return self.codes + self.scales_zeros + self.sparse_values + self.sparse_indices + self.lowrank + self.buffer

    @property
    def percent_of_fp16(self) -> float:
        return 100.0 * self.total / self.baseline if self.baseline else 0.0

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.FIELDS}

    def table(self) -> str:
        lines = [f"{'component':<16}{'bytes':>14}{'% of fp16':>12}"]
        for name in self.FIELDS[:6] + ("total",):
            val = getattr(self, name)
            pct = 100.0 * val / self.baseline if self.baseline else 0.0
            lines.append(f"{name:<16}{val:>14d}{pct:>11.2f}%")
        lines.append(f"{'fp16 baseline':<16}{self.baseline:>14d}{100.0:>11.2f}%")
        return "\n".join(lines)


@dataclass
class _Tally:
    codes: int = 0
    scales_zeros: int = 0
    sparse_values: int = 0
    sparse_indices: int = 0
    lowrank: int = 0


def _price_block(t: _Tally, cfg: GearConfig, role: str, rows: int, d: int, layout: HeadLayout,
                 rank: int, coverage: float, index_bytes: int) -> None:
    if rows == 0:
        return
    if cfg.passthrough:
        t.codes += rows * d * FP16_BYTES
        return
    scheme = cfg.scheme_for(role)
    t.codes += packed_length(rows * d, cfg.bits)
    t.scales_zeros += 2 * FP16_BYTES * scheme.group_count((rows, d))
    if cfg.outlier_axis_for(role) == CHANNEL:
        nnz = d * 2 * extraction_count(cfg.sparsity, rows)
    else:
        nnz = rows * 2 * extraction_count(cfg.sparsity, d)
    t.sparse_values += nnz * FP16_BYTES
    t.sparse_indices += nnz * 2 * index_bytes
    covered = rows - coverage_offset(rows, coverage)
    r = min(rank, covered, layout.head_dim)
    t.lowrank += layout.head_count * (covered + layout.head_dim) * r * FP16_BYTES


def account(cfg: GearConfig, n_prefill: int, n_gen: int, d: int, heads: int, *,
            buffer_tokens: int | None = None, buffer_fraction: float = 1.0,
            index_bits: int = 16) -> MemoryReport:
    """Predicted cache bytes after ``n_prefill`` prompt and ``n_gen`` generated tokens.

    With ``buffer_tokens=None`` every generated token is priced inside a
    compressed block (full blocks of ``buffer_size`` plus one trailing partial
    block) and the buffer is priced as a standing reservation of
    ``buffer_fraction * buffer_size`` raw tokens.  Passing ``buffer_tokens``
    prices a point-in-time cache instead: exactly that many generated tokens
    sit raw in the buffer and the rest fill whole blocks.
    """
    cfg.validate()
    if n_prefill < 0 or n_gen < 0 or d < 1:
        raise ValueError("token counts must be >= 0 and d >= 1")
    layout = HeadLayout.for_width(d, heads)
    index_bytes = math.ceil(index_bits / 8)
    nb = cfg.buffer_size

    if buffer_tokens is None:
        full, rest = divmod(n_gen, nb)
        decode_rows = [nb] * full + ([rest] if rest else [])
        buf_rows = buffer_fraction * nb
    else:
        if not 0 <= buffer_tokens <= n_gen or (n_gen - buffer_tokens) % nb:
            raise ValueError(
                f"{buffer_tokens} buffered tokens inconsistent with {n_gen} generated and buffer size {nb}"
            )
        decode_rows = [nb] * ((n_gen - buffer_tokens) // nb)
        buf_rows = buffer_tokens

    t = _Tally()
    for role in ROLES:
        _price_block(t, cfg, role, n_prefill, d, layout, cfg.rank_prefill, cfg.coverage, index_bytes)
        for rows in decode_rows:
            _price_block(t, cfg, role, rows, d, layout, cfg.rank_decode, 100.0, index_bytes)
    buffer_bytes = round(buf_rows * d * FP16_BYTES * len(ROLES))
    baseline = (n_prefill + n_gen) * d * FP16_BYTES * len(ROLES)
    return MemoryReport(t.codes, t.scales_zeros, t.sparse_values, t.sparse_indices, t.lowrank,
                        buffer_bytes, baseline)


def _block_bytes(t: _Tally, block: CompressedBlock, index_bytes: int) -> None:
    if block.raw is not None:
        t.codes += block.raw.size * FP16_BYTES
        return
    q = block.backbone
    t.codes += len(q.codes)
    t.scales_zeros += (q.scales.size + q.zeros.size) * FP16_BYTES
    t.sparse_values += block.outliers.nnz * FP16_BYTES
    t.sparse_indices += block.outliers.nnz * 2 * index_bytes
    t.lowrank += block.lowrank.parameter_count * FP16_BYTES


def account_state(state: KVCacheState, *, index_bits: int = 16) -> MemoryReport:
    """Bytes of a live cache, counted from its actual components."""
    index_bytes = math.ceil(index_bits / 8)
    t = _Tally()
    for block in state.key_blocks + state.value_blocks:
        _block_bytes(t, block, index_bytes)
    d = state.width
    buffer_bytes = (len(state.key_buffer) + len(state.value_buffer)) * d * FP16_BYTES
    baseline = state.total_tokens * d * FP16_BYTES * len(ROLES)
    return MemoryReport(t.codes, t.scales_zeros, t.sparse_values, t.sparse_indices, t.lowrank,
                        buffer_bytes, baseline)
