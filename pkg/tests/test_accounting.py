import numpy as np
import pytest

from gearkv.accounting import MemoryReport, account, account_state
from gearkv.cache import append_token, empty_cache, prefill
from gearkv.gear import GearConfig
from gearkv.presets import PRESETS, REPORTED_PRESETS, backbone_config
from gearkv.tensor import HeadLayout


def test_passthrough_without_buffer_is_full_size():
    rep = account(GearConfig(bits=16, buffer_size=64), 900, 256, 1024, 8, buffer_fraction=0.0)
    assert rep.total == rep.baseline
    assert rep.percent_of_fp16 == 100.0


@pytest.mark.parametrize("name", REPORTED_PRESETS)
def test_reported_kv_size_rows(name):
    p = PRESETS[name]
    rep = account(p.config(), p.n_prefill, p.n_gen, p.d, p.heads)
    assert abs(rep.percent_of_fp16 - p.reported_percent) <= 2.0


def test_kivi_byte_oracle():
    cfg = backbone_config("kivi-g64", bits=2, sparsity=0.0, rank_prefill=0, rank_decode=0, buffer_size=64)
    rep = account(cfg, 128, 0, 128, 1, buffer_fraction=0.0)
    # 128x128 2-bit codes per role; 256 groups per role with a 16-bit scale and zero each
    assert rep.codes == 2 * 4096
    assert rep.scales_zeros == 2 * 256 * 4
    assert rep.total == 10240 and rep.baseline == 65536
    assert rep.percent_of_fp16 == pytest.approx(15.625)


def test_sparse_and_lowrank_oracle():
    cfg = backbone_config("kcvt", bits=4, sparsity=2.0, rank_prefill=4, rank_decode=2, buffer_size=20)
    rep = account(cfg, 100, 0, 64, 2, buffer_fraction=0.0)
    # Keys: 64 columns of length 100 give 2 each; Values: 100 rows of length 64 give 0
    assert rep.sparse_values == 64 * 2 * 2
    assert rep.sparse_indices == 64 * 2 * 4
    assert rep.lowrank == 2 * 2 * (100 + 32) * 4 * 2


def _run(cfg, layout, n0, n_gen, seed=0):
    r = np.random.default_rng(seed)
    k = r.standard_normal((n0 + n_gen, layout.width)).astype(np.float32)
    v = r.standard_normal((n0 + n_gen, layout.width)).astype(np.float32)
    st = prefill(k[:n0], v[:n0], cfg, layout)
    for t in range(n0, n0 + n_gen):
        append_token(st, k[t], v[t])
    return st


@pytest.mark.parametrize("name", ["kcvt4", "gear-kcvt4", "gear-kivi2", "fp16"])
@pytest.mark.parametrize("n_gen", [0, 47])
def test_formula_matches_live_state(name, n_gen):
    cfg = PRESETS[name].config()
    layout = HeadLayout(2, 32)
    st = _run(cfg, layout, 70, n_gen)
    live = account_state(st)
    predicted = account(cfg, 70, n_gen, 64, 2, buffer_tokens=st.buffered_tokens)
    assert live == predicted


def test_monotone_in_each_knob():
    base = backbone_config("kivi-g64", bits=2, sparsity=1.0, rank_prefill=2, rank_decode=2, buffer_size=64)

    def pct(**kw):
        return account(base.with_(**kw), 900, 256, 1024, 8).percent_of_fp16

    assert pct(bits=2) < pct(bits=4) < pct(bits=8)
    assert pct(sparsity=0.0) < pct(sparsity=1.0) < pct(sparsity=5.0)
    assert pct(rank_prefill=0, rank_decode=0) < pct() < pct(rank_prefill=8, rank_decode=8)
    assert pct(buffer_size=64) < pct(buffer_size=128)


def test_empty_state_costs_nothing():
    rep = account_state(empty_cache(GearConfig(), HeadLayout(2, 64)))
    assert rep.total == 0 and rep.baseline == 0 and rep.percent_of_fp16 == 0.0


def test_report_rendering():
    rep = account(PRESETS["kivi2"].config(), 900, 256, 1024, 8)
    assert set(rep.as_dict()) == set(MemoryReport.FIELDS)
    table = rep.table()
    assert "total" in table and "fp16 baseline" in table


def test_rejects_inconsistent_buffer():
    with pytest.raises(ValueError):
        account(PRESETS["kivi2"].config(), 900, 100, 1024, 8, buffer_tokens=30)


def test_kivi_full_scale_spreadsheet_oracle():
    p = PRESETS["kivi2-gsm8k"]
    rep = account(p.config(), 900, 256, 1024, 8)
    d, n0 = 1024, 900
    codes = 2 * (n0 * d * 2 // 8) + 2 * 4 * (64 * d * 2 // 8)
    key_groups = 15 * d + 4 * d             # ceil(900/64) channel groups, then one per decode block
    value_groups = n0 * 16 + 4 * 64 * 16    # 16 groups per token row
    scales_zeros = (key_groups + value_groups) * 2 * 2
    buffer = 64 * d * 2 * 2
    assert (rep.codes, rep.scales_zeros, rep.buffer) == (codes, scales_zeros, buffer)
    assert rep.total == codes + scales_zeros + buffer == 1005824
    assert rep.baseline == 1156 * d * 2 * 2
    assert abs(rep.percent_of_fp16 - 22.7) <= 2.0
