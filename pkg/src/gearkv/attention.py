"""Single-query multi-head attention over exact and compressed caches.

Also holds the synthetic KV generator and the per-step deviation harness
that replays one token stream through an exact cache and several
compressed ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from gearkv.cache import KVCacheState, append_token, prefill
from gearkv.gear import GearConfig
from gearkv.tensor import HeadLayout, ShapeError


def _check_finite(*arrays) -> None:
    for a in arrays:
        if np.isnan(a).any():
            raise ValueError("NaN in attention inputs")


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _head_logits(qh: np.ndarray, k: np.ndarray, layout: HeadLayout) -> np.ndarray:
    kh = k.reshape(k.shape[0], layout.head_count, layout.head_dim)
    return np.einsum("nhk,hk->hn", kh, qh)


def _head_mix(w: np.ndarray, v: np.ndarray, layout: HeadLayout) -> np.ndarray:
    vh = v.reshape(v.shape[0], layout.head_count, layout.head_dim)
    return np.einsum("hn,nhk->hk", w, vh)


def attention_weights(q, k, layout: HeadLayout) -> np.ndarray:
    """Per-head softmax weights, shape (H, tokens)."""
    qh = np.asarray(q, dtype=np.float64).reshape(layout.head_count, layout.head_dim)
    logits = _head_logits(qh, np.asarray(k, dtype=np.float64), layout)
    return softmax_rows(logits / math.sqrt(layout.head_dim))


def attention_step(q, k, v, layout: HeadLayout) -> np.ndarray:
    """softmax(q_h K_h^T / sqrt(d_H)) V_h for every head, concatenated."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = layout.width
    if q.size != d or k.ndim != 2 or k.shape[1] != d or v.shape != k.shape:
        raise ShapeError(f"inconsistent shapes q={q.shape} K={k.shape} V={v.shape} for width {d}")
    if k.shape[0] == 0:
        raise ShapeError("attention over an empty cache")
    _check_finite(q, k, v)
    w = attention_weights(q, k, layout)
    return _head_mix(w, v, layout).reshape(d)


def _backbone_stream(state: KVCacheState, role: str) -> np.ndarray:
    parts = [b.backbone_dense() for b in state.blocks(role)]
    parts.append(state.buffer_matrix(role))
    return np.concatenate(parts, axis=0).astype(np.float64)


def _add_side_logits(logits: np.ndarray, qh: np.ndarray, block, pos: int, dh: int) -> None:
    lr = block.lowrank
    if not lr.is_empty:
        lo = pos + lr.row_offset
        for h in range(qh.shape[0]):
            down = qh[h] @ lr.b[h].astype(np.float64)  # (r,)
            logits[h, lo:pos + block.rows] += lr.a[h].astype(np.float64) @ down
    s = block.outliers
    if s.nnz:
        heads, within = np.divmod(s.cols, dh)
        np.add.at(logits, (heads, pos + s.rows), qh[heads, within] * s.values.astype(np.float64))


def _add_side_output(out: np.ndarray, w: np.ndarray, block, pos: int, dh: int) -> None:
    lr = block.lowrank
    if not lr.is_empty:
        lo = pos + lr.row_offset
        for h in range(out.shape[0]):
            down = w[h, lo:pos + block.rows] @ lr.a[h].astype(np.float64)
            out[h] += lr.b[h].astype(np.float64) @ down
    s = block.outliers
    if s.nnz:
        heads, within = np.divmod(s.cols, dh)
        np.add.at(out, (heads, within), w[heads, pos + s.rows] * s.values.astype(np.float64))


def attention_step_compressed(q, state: KVCacheState) -> np.ndarray:
    """Attention against a compressed cache without materializing L or S.

    The dequantized backbones (and raw buffer rows) are attended to as one
    stream; each block's low-rank term then runs as a down projection
    ``q_h B_h`` followed by an up projection through ``A_h``, and its
    outliers as a sparse dot product.
    """
    layout = state.layout
    H, dh = layout.head_count, layout.head_dim
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.size != layout.width:
        raise ShapeError(f"query length {q.size} does not match width {layout.width}")
    if state.total_tokens == 0:
        raise ShapeError("attention over an empty cache")
    _check_finite(q)
    qh = q.reshape(H, dh)

    logits = _head_logits(qh, _backbone_stream(state, "key"), layout)
    pos = 0
    for block in state.key_blocks:
        _add_side_logits(logits, qh, block, pos, dh)
        pos += block.rows
    w = softmax_rows(logits / math.sqrt(dh))

    out = _head_mix(w, _backbone_stream(state, "value"), layout)
    pos = 0
    for block in state.value_blocks:
        _add_side_output(out, w, block, pos, dh)
        pos += block.rows
    return out.reshape(-1)


# ---------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class SyntheticKVSpec:
    n: int = 512
    d: int = 256
    heads: int = 2
    seed: int = 0
    outlier_channel_count: int = 4
    outlier_scale: float = 16.0
    token_correlation: float = 0.9
    latent_rank: int = 8
    latent_weight: float = 1.0

    def __post_init__(self):
        if self.n < 1 or self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise ShapeError(f"invalid synthetic dims n={self.n} d={self.d} heads={self.heads}")
        if not 0 <= self.outlier_channel_count <= self.d:
            raise ValueError("outlier channel count must be within [0, d]")
        if not 0 <= self.token_correlation < 1:
            raise ValueError("token correlation must be in [0, 1)")
        if self.outlier_scale <= 0:
            raise ValueError("outlier scale must be positive")

    @property
    def layout(self) -> HeadLayout:
        return HeadLayout.for_width(self.d, self.heads)

    def outlier_channels(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 99])
        return np.sort(rng.choice(self.d, size=self.outlier_channel_count, replace=False))


def _ar1(rng: np.random.Generator, n: int, width: int, rho: float) -> np.ndarray:
    eps = rng.standard_normal((n, width))
    out = np.empty_like(eps)
    out[0] = eps[0]
    tail = math.sqrt(1.0 - rho * rho)
    for t in range(1, n):
        out[t] = rho * out[t - 1] + tail * eps[t]
    return out


def _kv_matrix(rng: np.random.Generator, spec: SyntheticKVSpec, channels: np.ndarray) -> np.ndarray:
    # coherent part: a few AR(1) latent factors mixed into every channel
    latent = _ar1(rng, spec.n, spec.latent_rank, spec.token_correlation)
    mixing = rng.standard_normal((spec.latent_rank, spec.d)) / math.sqrt(max(spec.latent_rank, 1))
    noise = _ar1(rng, spec.n, spec.d, spec.token_correlation)
    x = spec.latent_weight * (latent @ mixing) + noise
    x /= math.sqrt(1.0 + spec.latent_weight**2)
    x[:, channels] *= spec.outlier_scale
    return x.astype(np.float32)


def generate_synthetic_kv(spec: SyntheticKVSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic (K, V, q) streams of shape (n, d) with a few loud channels."""
    channels = spec.outlier_channels()
    rng = np.random.default_rng([spec.seed, 0])
    k = _kv_matrix(rng, spec, channels)
    v = _kv_matrix(rng, spec, channels)
    q = rng.standard_normal((spec.n, spec.d)).astype(np.float32)
    return k, v, q


# ---------------------------------------------------------------- deviation harness

@dataclass
class DeviationTrace:
    cfg_id: str
    steps: list[int] = field(default_factory=list)
    l2: list[float] = field(default_factory=list)
    cosine: list[float] = field(default_factory=list)

    def record(self, step: int, approx: np.ndarray, exact: np.ndarray) -> None:
        dev = float(np.linalg.norm(approx - exact))
        na, ne = float(np.linalg.norm(approx)), float(np.linalg.norm(exact))
        cos = float(np.dot(approx, exact) / (na * ne)) if na > 0 and ne > 0 else float(na == ne)
        self.steps.append(step)
        self.l2.append(dev)
        self.cosine.append(min(1.0, max(-1.0, cos)))

    @property
    def mean_l2(self) -> float:
        return float(np.mean(self.l2)) if self.l2 else 0.0

    def rows(self):
        for step, dev, cos in zip(self.steps, self.l2, self.cosine):
            yield {"step": step, "l2_dev": dev, "cosine": cos, "cfg_id": self.cfg_id}


def run_deviation(spec: SyntheticKVSpec, cfgs: Mapping[str, GearConfig], steps: int,
                  prefill_tokens: int | None = None) -> dict[str, DeviationTrace]:
    """Replay one synthetic stream through an exact cache and each compressed cache.

    The first ``prefill_tokens`` rows (default ``spec.n - steps``) form the
    prompt; each later row is appended and then attended to with that
    step's query.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    n0 = spec.n - steps if prefill_tokens is None else prefill_tokens
    if n0 < 0 or n0 + steps > spec.n:
        raise ValueError(f"spec.n={spec.n} too small for {n0} prefill + {steps} steps")
    k, v, q = generate_synthetic_kv(spec)
    layout = spec.layout
    traces = {}
    for cfg_id, cfg in cfgs.items():
        state = prefill(k[:n0], v[:n0], cfg, layout)
        trace = DeviationTrace(cfg_id)
        for step in range(steps):
            t = n0 + step
            append_token(state, k[t], v[t])
            exact = attention_step(q[t], k[:t + 1], v[:t + 1], layout)
            trace.record(step, attention_step_compressed(q[t], state), exact)
        traces[cfg_id] = trace
    return traces
