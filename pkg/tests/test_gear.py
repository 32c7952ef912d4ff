import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gearkv.attention import SyntheticKVSpec, generate_synthetic_kv
from gearkv.gear import (
    KEY, VALUE, ConfigError, FlushThresholdError, GearConfig, compress_block, coverage_offset,
    error_report, reconstruct_block,
)
from gearkv.outliers import filter_outliers
from gearkv.presets import backbone_config
from gearkv.quant import GroupingScheme, dequantize, quantize
from gearkv.tensor import HeadLayout

LAYOUT = HeadLayout(2, 8)


def _x(seed, n=24, d=16):
    return np.random.default_rng(seed).standard_normal((n, d)).astype(np.float32)


def test_quant_only_block_equals_quantizer():
    x = _x(0)
    cfg = GearConfig(bits=4, sparsity=0, key_scheme=GroupingScheme.per_channel(8), buffer_size=8)
    block = compress_block(x, cfg, KEY, 0, LAYOUT)
    expected = dequantize(quantize(x, 4, GroupingScheme.per_channel(8)))
    np.testing.assert_array_equal(reconstruct_block(block), expected)
    assert block.outliers.nnz == 0 and block.lowrank.is_empty


def test_passthrough_is_exact():
    x = _x(1)
    block = compress_block(x, GearConfig(bits=16), VALUE, 4, LAYOUT)
    np.testing.assert_array_equal(reconstruct_block(block), x)
    assert error_report(x, block).frobenius == 0


def test_grid_values_reconstruct_exactly():
    codes = np.random.default_rng(2).integers(0, 4, size=(8, 16))
    x = codes.astype(np.float32)
    x[0], x[1] = 0, 3  # every column spans the full grid
    cfg = GearConfig(bits=2, sparsity=0, key_scheme=GroupingScheme.per_channel_vector(), buffer_size=8)
    block = compress_block(x, cfg, KEY, 2, LAYOUT)
    np.testing.assert_allclose(reconstruct_block(block), x, atol=1e-6)


def test_components_sum_to_reconstruction():
    x = _x(3)
    cfg = backbone_config("kcvt", bits=2, sparsity=20.0)
    block = compress_block(x, cfg, KEY, 3, LAYOUT)
    manual = dequantize(block.backbone).astype(np.float64) + block.lowrank.to_dense() + block.outliers.to_dense()
    np.testing.assert_allclose(reconstruct_block(block), manual, atol=1e-5)


def test_residual_oracle_matches_pipeline():
    x = _x(4)
    cfg = backbone_config("kcvt", bits=2, sparsity=10.0)
    s, rem = filter_outliers(x, 10.0, "channel")
    d = dequantize(quantize(rem, 2, cfg.key_scheme))
    block = compress_block(x, cfg, KEY, 0, LAYOUT)
    np.testing.assert_array_equal(block.outliers.to_dense(), s.to_dense())
    np.testing.assert_array_equal(block.backbone_dense(), d)


def test_outliers_help_on_loud_entries():
    x = _x(5, n=64, d=16)
    x[3, 2] = 80.0
    x[40, 9] = -90.0
    base = backbone_config("kcvt", bits=2, sparsity=0.0)
    with_s = base.with_(sparsity=4.0)
    e0 = error_report(x, compress_block(x, base, KEY, 0, LAYOUT)).frobenius
    e1 = error_report(x, compress_block(x, with_s, KEY, 0, LAYOUT)).frobenius
    assert e1 < e0


def test_error_dominance_on_synthetic():
    k, v, _ = generate_synthetic_kv(SyntheticKVSpec(n=256, d=128, heads=2, seed=3))
    layout = HeadLayout(2, 64)
    backbone = backbone_config("kivi-g64", bits=2, sparsity=0.0, buffer_size=64)
    gear = backbone.with_(sparsity=2.0)
    for x, role in ((k, KEY), (v, VALUE)):
        eb = error_report(x, compress_block(x, backbone, role, 0, layout)).relative
        el = error_report(x, compress_block(x, backbone, role, 4, layout)).relative
        eg = error_report(x, compress_block(x, gear, role, 4, layout)).relative
        assert eg < el < eb


@settings(max_examples=20)
@given(st.integers(0, 2**31))
def test_error_non_increasing_in_bits(seed):
    x = _x(seed)
    cfg = backbone_config("kcvt", sparsity=2.0)
    errs = [error_report(x, compress_block(x, cfg.with_(bits=b), VALUE, 0, LAYOUT)).frobenius for b in (2, 4, 8)]
    assert errs[0] >= errs[1] >= errs[2]


def test_low_rank_removes_residual_energy():
    k, _, _ = generate_synthetic_kv(SyntheticKVSpec(n=256, d=128, heads=2, seed=1))
    layout = HeadLayout(2, 64)
    cfg = backbone_config("kivi-g64", bits=2, sparsity=0.0)
    e0 = error_report(k, compress_block(k, cfg, KEY, 0, layout)).frobenius
    e4 = error_report(k, compress_block(k, cfg, KEY, 4, layout)).frobenius
    assert e4**2 <= 0.7 * e0**2


def test_coverage_restricts_low_rank_rows():
    assert coverage_offset(100, 100) == 0
    assert coverage_offset(100, 25) == 75
    assert coverage_offset(10, 33) == 6  # ceil(3.3) = 4 rows covered
    assert coverage_offset(10, 0) == 10
    x = _x(6)
    cfg = backbone_config("kcvt", bits=2)
    block = compress_block(x, cfg, KEY, 2, LAYOUT, coverage=50)
    dense = block.lowrank.to_dense()
    assert np.all(dense[:12] == 0) and np.any(dense[12:] != 0)
    full = compress_block(x, cfg, KEY, 2, LAYOUT)
    np.testing.assert_array_equal(block.backbone_dense(), full.backbone_dense())


def test_error_report_shares():
    x = _x(7)
    rep = error_report(x, compress_block(x, backbone_config("kcvt", bits=2, sparsity=10.0), KEY, 2, LAYOUT))
    assert rep.share_backbone + rep.share_lowrank + rep.share_outliers == pytest.approx(1.0)
    assert 0 < rep.relative < 1
    assert set(rep.as_dict()) == set(rep.FIELDS)


def test_config_validation():
    with pytest.raises(ConfigError):
        GearConfig(bits=3).validate()
    with pytest.raises(ConfigError):
        GearConfig(sparsity=-1).validate()
    with pytest.raises(ConfigError):
        GearConfig(coverage=101).validate()
    with pytest.raises(FlushThresholdError):
        GearConfig(buffer_size=20).validate()  # channel groups of 64
    GearConfig(buffer_size=128).validate()
    backbone_config("kcvt", buffer_size=20).validate()
    # passthrough never quantizes, so the flush law does not apply
    GearConfig(bits=16, buffer_size=20).validate()


def test_rejects_bad_inputs():
    cfg = GearConfig()
    with pytest.raises(ValueError):
        compress_block(_x(0), cfg, "query", 1, LAYOUT)
    with pytest.raises(ValueError):
        compress_block(np.zeros((0, 16), np.float32), cfg, KEY, 1, LAYOUT)
    with pytest.raises(ValueError):
        compress_block(_x(0), cfg, KEY, 1, HeadLayout(3, 4))
    bad = _x(0)
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        compress_block(bad, cfg, KEY, 1, LAYOUT)
