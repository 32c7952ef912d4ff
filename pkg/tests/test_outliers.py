import numpy as np
import pytest
from hypothesis import given, strategies as st

from gearkv.outliers import CHANNEL, TOKEN, extraction_count, filter_outliers, validate_outliers


def _sort_oracle(x, s, axis):
    """Independent selection: python sorted() over (value, index) keys."""
    vecs = x if axis == TOKEN else x.T
    out = []
    for i, vec in enumerate(vecs.tolist()):
        k = int(s * len(vec) // 200) if float(s).is_integer() else extraction_count(s, len(vec))
        idx = list(range(len(vec)))
        top = sorted(idx, key=lambda j: (-vec[j], j))[:k]
        rest = [j for j in idx if j not in top]
        bot = sorted(rest, key=lambda j: (vec[j], j))[:k]
        for j in top + bot:
            out.append((i, j) if axis == TOKEN else (j, i))
    return sorted(out)


def test_zero_sparsity_is_identity(rng):
    x = rng.standard_normal((5, 6)).astype(np.float32)
    s, rem = filter_outliers(x, 0, CHANNEL)
    assert s.nnz == 0
    np.testing.assert_array_equal(rem, x)


def test_long_column_extracts_one_each_end():
    col = np.arange(100, dtype=np.float32)[:, None]
    s, rem = filter_outliers(col, 2, CHANNEL)
    assert s.entries() == [(0, 0, 0.0), (99, 0, 99.0)]
    assert rem[0, 0] == 0 and rem[99, 0] == 0 and rem[50, 0] == 50


def test_small_worked_example():
    x = np.array([[1, 9], [5, 5], [0, 7]], np.float32)
    # k = floor(34 * 3 / 200) = 0 for length-3 columns
    assert extraction_count(34, 3) == 0
    assert filter_outliers(x, 34, CHANNEL)[0].nnz == 0
    s, rem = filter_outliers(x, 67, CHANNEL)
    assert extraction_count(67, 3) == 1
    # column 0: max 5 at row 1, min 0 at row 2; column 1: max 9 at row 0, min 5 at row 1
    assert s.entries() == [(0, 1, 9.0), (1, 0, 5.0), (1, 1, 5.0), (2, 0, 0.0)]
    np.testing.assert_array_equal(rem, [[1, 0], [0, 0], [0, 7]])


def test_ties_take_smallest_index():
    x = np.array([[3, 3, 1, 1, 3, 1]], np.float32)
    s, _ = filter_outliers(x, 34, TOKEN)  # k = 1
    assert s.entries() == [(0, 0, 3.0), (0, 2, 1.0)]


def test_constant_vector_disjoint_picks():
    x = np.full((1, 4), 2.0, np.float32)
    s, rem = filter_outliers(x, 100, TOKEN)  # k = 2, every entry taken once
    assert s.cols.tolist() == [0, 1, 2, 3]
    np.testing.assert_array_equal(rem, 0)


def test_count_uses_exact_decimal():
    # 0.1 * 2000 / 200 = 1 exactly; float arithmetic could land just below
    assert extraction_count(0.1, 2000) == 1
    assert extraction_count(2, 99) == 0
    assert extraction_count(2, 100) == 1
    assert extraction_count(100, 7) == 3


def test_rejects_bad_arguments():
    x = np.zeros((2, 2), np.float32)
    with pytest.raises(ValueError):
        filter_outliers(x, 101, CHANNEL)
    with pytest.raises(ValueError):
        filter_outliers(x, 2, "head")


matrices = st.tuples(st.integers(0, 2**31), st.integers(1, 12), st.integers(1, 12), st.booleans())


def _draw(seed, n, d, discrete):
    r = np.random.default_rng(seed)
    if discrete:  # many ties
        return r.integers(-3, 4, size=(n, d)).astype(np.float32)
    return r.standard_normal((n, d)).astype(np.float32)


@given(matrices, st.sampled_from([CHANNEL, TOKEN]), st.sampled_from([0, 2, 10, 34, 50, 100]))
def test_matches_sort_oracle(m, axis, s):
    x = _draw(*m)
    out, rem = filter_outliers(x, s, axis)
    got = list(zip(out.rows.tolist(), out.cols.tolist()))
    assert got == _sort_oracle(x, s, axis)
    validate_outliers(out)


@given(matrices, st.sampled_from([CHANNEL, TOKEN]), st.sampled_from([2, 20, 67]))
def test_exact_decomposition_and_counts(m, axis, s):
    x = _draw(*m)
    out, rem = filter_outliers(x, s, axis)
    np.testing.assert_array_equal(out.to_dense() + rem, x)
    vecs_len = x.shape[1] if axis == TOKEN else x.shape[0]
    nvec = x.shape[0] if axis == TOKEN else x.shape[1]
    assert out.nnz == 2 * extraction_count(s, vecs_len) * nvec


@given(matrices, st.sampled_from([CHANNEL, TOKEN]), st.sampled_from([20, 50]))
def test_extremality(m, axis, s):
    x = _draw(*m)
    out, _ = filter_outliers(x, s, axis)
    if out.nnz == 0:
        return
    picked = np.zeros(x.shape, bool)
    picked[out.rows, out.cols] = True
    vecs = x if axis == TOKEN else x.T
    pk = picked if axis == TOKEN else picked.T
    k = extraction_count(s, vecs.shape[1])
    for v, p in zip(vecs, pk):
        kept = v[~p]
        if kept.size == 0:
            continue
        taken = np.sort(v[p])
        # every taken value is at least as extreme as any kept value on its side
        assert taken[-k:].min() >= kept.max()
        assert taken[:k].max() <= kept.min()
