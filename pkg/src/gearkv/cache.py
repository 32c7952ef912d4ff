"""Streaming KV cache: compressed prefill, full-precision buffer, periodic flush.

The prompt's Keys/Values are compressed once with the prefill rank.  Each
decode step pushes one raw row into the Key and Value buffers; when they
reach ``buffer_size`` rows both are compressed with the decode rank and
appended as new blocks.  Flushed blocks are never touched again.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from os import PathLike

import numpy as np

from gearkv.gear import KEY, VALUE, CompressedBlock, GearConfig, compress_block, reconstruct_block
from gearkv.lowrank import LowRankFactors
from gearkv.outliers import SparseOutliers
from gearkv.quant import GroupingScheme, QuantizedTensor
from gearkv.tensor import HeadLayout, ShapeError, as_matrix

SNAPSHOT_MAGIC = b"GKV1"
SNAPSHOT_VERSION = 1


@dataclass
class KVCacheState:
    cfg: GearConfig
    layout: HeadLayout
    key_blocks: list[CompressedBlock] = field(default_factory=list)
    value_blocks: list[CompressedBlock] = field(default_factory=list)
    key_buffer: list[np.ndarray] = field(default_factory=list)
    value_buffer: list[np.ndarray] = field(default_factory=list)
    has_prefill: bool = False

    @property
    def width(self) -> int:
        return self.layout.width

    @property
    def compressed_tokens(self) -> int:
        return sum(b.rows for b in self.key_blocks)

    @property
    def buffered_tokens(self) -> int:
        return len(self.key_buffer)

    @property
    def total_tokens(self) -> int:
        return self.compressed_tokens + self.buffered_tokens

    @property
    def decode_block_count(self) -> int:
        return len(self.key_blocks) - int(self.has_prefill)

    def buffer_matrix(self, role: str) -> np.ndarray:
        rows = self.key_buffer if role == KEY else self.value_buffer
        if not rows:
            return np.zeros((0, self.width), dtype=np.float32)
        return np.stack(rows).astype(np.float32)

    def blocks(self, role: str) -> list[CompressedBlock]:
        return self.key_blocks if role == KEY else self.value_blocks


def prefill(k0, v0, cfg: GearConfig, layout: HeadLayout) -> KVCacheState:
    """Build a cache from the prompt's Keys and Values (one block each)."""
    cfg.validate()
    k0 = as_matrix(k0, name="K0")
    v0 = as_matrix(v0, name="V0")
    if k0.shape != v0.shape:
        raise ShapeError(f"K0 {k0.shape} and V0 {v0.shape} differ")
    if k0.shape[1] != layout.width:
        raise ShapeError(f"{k0.shape[1]} channels do not match layout width {layout.width}")
    state = KVCacheState(cfg, layout)
    if k0.shape[0]:
        state.key_blocks.append(compress_block(k0, cfg, KEY, cfg.rank_prefill, layout, coverage=cfg.coverage))
        state.value_blocks.append(compress_block(v0, cfg, VALUE, cfg.rank_prefill, layout, coverage=cfg.coverage))
        state.has_prefill = True
    return state


def empty_cache(cfg: GearConfig, layout: HeadLayout) -> KVCacheState:
    return prefill(np.zeros((0, layout.width), np.float32), np.zeros((0, layout.width), np.float32), cfg, layout)


def _row(vec, d: int, name: str) -> np.ndarray:
    row = np.asarray(vec, dtype=np.float32).reshape(-1)
    if row.size != d:
        raise ShapeError(f"{name} has length {row.size}, expected {d}")
    if not np.all(np.isfinite(row)):
        raise ValueError(f"{name} contains non-finite values")
    return row.copy()


def append_token(state: KVCacheState, k_t, v_t) -> KVCacheState:
    """Push one decoded token; flush both buffers into blocks when full."""
    d = state.width
    state.key_buffer.append(_row(k_t, d, "k_t"))
    state.value_buffer.append(_row(v_t, d, "v_t"))
    if len(state.key_buffer) >= state.cfg.buffer_size:
        flush(state)
    return state


def flush(state: KVCacheState) -> None:
    if not state.key_buffer:
        return
    start = state.compressed_tokens
    cfg = state.cfg
    kb, vb = state.buffer_matrix(KEY), state.buffer_matrix(VALUE)
    state.key_blocks.append(compress_block(kb, cfg, KEY, cfg.rank_decode, state.layout, start=start))
    state.value_blocks.append(compress_block(vb, cfg, VALUE, cfg.rank_decode, state.layout, start=start))
    state.key_buffer.clear()
    state.value_buffer.clear()


def materialize(state: KVCacheState) -> tuple[np.ndarray, np.ndarray]:
    """Dense (K, V) of shape (total_tokens, d): reconstructed blocks, then raw buffer rows."""
    out = []
    for role in (KEY, VALUE):
        parts = [reconstruct_block(b) for b in state.blocks(role)]
        parts.append(state.buffer_matrix(role))
        out.append(np.ascontiguousarray(np.concatenate(parts, axis=0)))
    return out[0], out[1]


# ---------------------------------------------------------------- snapshots

class _Blob:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.size = 0

    def put(self, arr: np.ndarray, dtype: str) -> dict:
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        ref = {"off": self.size, "len": len(raw), "dtype": dtype, "shape": list(np.shape(arr))}
        self.chunks.append(raw)
        self.size += len(raw)
        return ref

    def put_bytes(self, raw: bytes) -> dict:
        ref = {"off": self.size, "len": len(raw)}
        self.chunks.append(raw)
        self.size += len(raw)
        return ref


def _take(payload: bytes, ref: dict) -> np.ndarray:
    end = ref["off"] + ref["len"]
    if end > len(payload):
        raise ValueError("snapshot payload truncated")
    arr = np.frombuffer(payload[ref["off"]:end], dtype=ref["dtype"])
    return arr.reshape(ref["shape"]).copy()


def _scheme_dict(s: GroupingScheme) -> dict:
    return {"axis": s.axis, "group_size": s.group_size}


def _block_record(b: CompressedBlock, blob: _Blob) -> dict:
    rec = {"role": b.role, "start": b.start, "rows": b.rows, "cols": b.cols}
    if b.raw is not None:
        rec["raw"] = blob.put(b.raw, "<f4")
    else:
        q = b.backbone
        rec["backbone"] = {
            "bits": q.bits, "scheme": _scheme_dict(q.scheme), "shape": list(q.shape),
            "codes": blob.put_bytes(q.codes),
            "scales": blob.put(q.scales, "<f4"), "zeros": blob.put(q.zeros, "<f4"),
        }
    s = b.outliers
    rec["outliers"] = {
        "axis": s.axis, "rows": blob.put(s.rows, "<i8"), "cols": blob.put(s.cols, "<i8"),
        "values": blob.put(s.values, "<f4"),
    }
    lr = b.lowrank
    rec["lowrank"] = {
        "rank": lr.rank, "heads": lr.layout.head_count, "head_dim": lr.layout.head_dim,
        "rows": lr.rows, "row_offset": lr.row_offset, "clamped": lr.clamped, "deficient": lr.deficient,
        "a": [blob.put(a, "<f4") for a in lr.a], "b": [blob.put(x, "<f4") for x in lr.b],
    }
    return rec


def _block_from_record(rec: dict, payload: bytes) -> CompressedBlock:
    shape = (rec["rows"], rec["cols"])
    o = rec["outliers"]
    outliers = SparseOutliers(_take(payload, o["rows"]).astype(np.int64), _take(payload, o["cols"]).astype(np.int64),
                              _take(payload, o["values"]).astype(np.float32), shape, o["axis"])
    l = rec["lowrank"]
    layout = HeadLayout(l["heads"], l["head_dim"])
    lowrank = LowRankFactors(
        tuple(_take(payload, r).astype(np.float32) for r in l["a"]),
        tuple(_take(payload, r).astype(np.float32) for r in l["b"]),
        l["rank"], layout, l["rows"], l["row_offset"], l["clamped"], l["deficient"],
    )
    raw = backbone = None
    if "raw" in rec:
        raw = _take(payload, rec["raw"]).astype(np.float32)
    else:
        q = rec["backbone"]
        c = q["codes"]
        backbone = QuantizedTensor(
            payload[c["off"]:c["off"] + c["len"]],
            _take(payload, q["scales"]).astype(np.float32), _take(payload, q["zeros"]).astype(np.float32),
            GroupingScheme(**q["scheme"]), tuple(q["shape"]), q["bits"],
        )
    return CompressedBlock(rec["role"], rec["start"], rec["rows"], rec["cols"], backbone, outliers, lowrank, raw)


def _config_dict(cfg: GearConfig) -> dict:
    out = dict(cfg.__dict__)
    out["key_scheme"] = _scheme_dict(cfg.key_scheme)
    out["value_scheme"] = _scheme_dict(cfg.value_scheme)
    return out


def _config_from_dict(d: dict) -> GearConfig:
    d = dict(d)
    d["key_scheme"] = GroupingScheme(**d["key_scheme"])
    d["value_scheme"] = GroupingScheme(**d["value_scheme"])
    return GearConfig(**d)


def encode_state(state: KVCacheState) -> bytes:
    blob = _Blob()
    meta = {
        "version": SNAPSHOT_VERSION,
        "config": _config_dict(state.cfg),
        "layout": [state.layout.head_count, state.layout.head_dim],
        "has_prefill": state.has_prefill,
        "key_blocks": [_block_record(b, blob) for b in state.key_blocks],
        "value_blocks": [_block_record(b, blob) for b in state.value_blocks],
        "key_buffer": blob.put(state.buffer_matrix(KEY), "<f4"),
        "value_buffer": blob.put(state.buffer_matrix(VALUE), "<f4"),
    }
    head = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    return SNAPSHOT_MAGIC + struct.pack("<II", SNAPSHOT_VERSION, len(head)) + head + b"".join(blob.chunks)


def decode_state(buf: bytes) -> KVCacheState:
    if len(buf) < 12:
        raise ValueError("truncated snapshot header")
    if buf[:4] != SNAPSHOT_MAGIC:
        raise ValueError(f"bad snapshot magic {buf[:4]!r}")
    version, head_len = struct.unpack_from("<II", buf, 4)
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    meta = json.loads(buf[12:12 + head_len])
    payload = buf[12 + head_len:]
    cfg = _config_from_dict(meta["config"])
    state = KVCacheState(cfg, HeadLayout(*meta["layout"]))
    state.has_prefill = meta["has_prefill"]
    state.key_blocks = [_block_from_record(r, payload) for r in meta["key_blocks"]]
    state.value_blocks = [_block_from_record(r, payload) for r in meta["value_blocks"]]
    state.key_buffer = list(_take(payload, meta["key_buffer"]).astype(np.float32))
    state.value_buffer = list(_take(payload, meta["value_buffer"]).astype(np.float32))
    return state


def save_state(state: KVCacheState, path: str | PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_state(state))


def load_state(path: str | PathLike) -> KVCacheState:
    with open(path, "rb") as fh:
        return decode_state(fh.read())
