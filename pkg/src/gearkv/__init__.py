"""GEAR-style KV-cache compression: quantized backbone + low-rank residual + sparse outliers."""

from gearkv.tensor import HeadLayout, frobenius_error, load_tensor, save_tensor, split_heads
from gearkv.quant import GroupingScheme, QuantizedTensor, dequantize, quantize
from gearkv.outliers import SparseOutliers, filter_outliers
from gearkv.lowrank import LowRankFactors, orthonormalize, power_iteration_svd, solve_heads
from gearkv.gear import CompressedBlock, GearConfig, compress_block, error_report, reconstruct_block
from gearkv.cache import KVCacheState, append_token, materialize, prefill
from gearkv.attention import (
    DeviationTrace,
    SyntheticKVSpec,
    attention_step,
    attention_step_compressed,
    generate_synthetic_kv,
    run_deviation,
)
from gearkv.accounting import MemoryReport, account, account_state

__all__ = [
    "HeadLayout", "frobenius_error", "load_tensor", "save_tensor", "split_heads",
    "GroupingScheme", "QuantizedTensor", "dequantize", "quantize",
    "SparseOutliers", "filter_outliers",
    "LowRankFactors", "orthonormalize", "power_iteration_svd", "solve_heads",
    "CompressedBlock", "GearConfig", "compress_block", "error_report", "reconstruct_block",
    "KVCacheState", "append_token", "materialize", "prefill",
    "DeviationTrace", "SyntheticKVSpec", "attention_step", "attention_step_compressed",
    "generate_synthetic_kv", "run_deviation",
    "MemoryReport", "account", "account_state",
]
