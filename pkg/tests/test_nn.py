"""Attention-core tests: projections, softmax, and multi-head attention
against independently computed oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from envfuse import autodiff as ad
from envfuse.nn import (
    AttentionOutput,
    DimensionError,
    Linear,
    MultiHeadAttention,
    linear_forward,
    mha_forward,
    softmax_rows,
)


def test_linear_identity():
    p = Linear(np.eye(4), np.zeros(4))
    x = np.arange(12, dtype=float).reshape(3, 4)
    y = linear_forward(x, p)
    assert np.array_equal(y.data, x)


def test_linear_zero_weight_bias_broadcast():
    b = np.array([1.0, -2.0])
    p = Linear(np.zeros((3, 2)), b)
    y = linear_forward(np.ones((5, 3)), p)
    assert np.array_equal(y.data, np.tile(b, (5, 1)))


def test_linear_matches_triple_loop_matmul():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 2))
    b = rng.standard_normal(2)
    # independent oracle: naive triple loop
    expect = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            acc = 0.0
            for t in range(4):
                acc += x[i, t] * w[t, j]
            expect[i, j] = acc + b[j]
    y = linear_forward(x, Linear(w, b))
    np.testing.assert_allclose(y.data, expect, rtol=0, atol=1e-12)


def test_linear_dimension_mismatch():
    p = Linear(np.eye(3), np.zeros(3))
    with pytest.raises(DimensionError):
        linear_forward(np.ones((2, 4)), p)


def test_softmax_symmetry():
    np.testing.assert_allclose(softmax_rows([[0.0, 0.0]]), [[0.5, 0.5]])


def test_softmax_analytic():
    out = softmax_rows([[np.log(2.0), 0.0]])
    np.testing.assert_allclose(out, [[2.0 / 3.0, 1.0 / 3.0]], atol=1e-15)


def test_softmax_large_values_stable():
    out = softmax_rows([[1000.0, 1000.0, 999.0]])
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out.sum(axis=1), [1.0], atol=1e-12)


def _mha(rng, d_model, heads):
    return MultiHeadAttention.init(rng, d_model, heads)


def test_mha_single_context_row_full_mass():
    rng = np.random.default_rng(0)
    for heads in (1, 2, 4):
        p = _mha(rng, 8, heads)
        out = mha_forward(rng.standard_normal((3, 8)), rng.standard_normal((1, 8)), p)
        np.testing.assert_array_equal(out.avg_weights.data, np.ones((3, 1)))


def test_mha_identical_context_uniform():
    rng = np.random.default_rng(1)
    p = _mha(rng, 8, 2)
    row = rng.standard_normal(8)
    ctx = np.tile(row, (5, 1))
    out = mha_forward(rng.standard_normal((2, 8)), ctx, p)
    np.testing.assert_allclose(out.avg_weights.data, np.full((2, 5), 0.2), atol=1e-12)


def test_mha_matches_single_head_oracle():
    # h=1, d_model=2: the whole computation fits in a few numpy lines
    rng = np.random.default_rng(2)
    wq, wk, wv, wo = (rng.standard_normal((2, 2)) for _ in range(4))
    bq, bk, bv, bo = (rng.standard_normal(2) for _ in range(4))
    p = MultiHeadAttention(1, Linear(wq, bq), Linear(wk, bk), Linear(wv, bv), Linear(wo, bo))
    query = rng.standard_normal((1, 2))
    ctx = rng.standard_normal((3, 2))

    q = query @ wq + bq
    k = ctx @ wk + bk
    v = ctx @ wv + bv
    scores = (q @ k.T) / np.sqrt(2.0)
    e = np.exp(scores - scores.max())
    w = e / e.sum()
    expect_weights = w
    expect_updated = (w @ v) @ wo + bo

    out = mha_forward(query, ctx, p)
    np.testing.assert_allclose(out.avg_weights.data, expect_weights, atol=1e-10)
    np.testing.assert_allclose(out.updated.data, expect_updated, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_mha_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    p = _mha(rng, 4, 2)
    query = rng.standard_normal((2, 4))
    ctx = rng.standard_normal((5, 4))
    perm = rng.permutation(5)
    base = mha_forward(query, ctx, p)
    permuted = mha_forward(query, ctx[perm], p)
    np.testing.assert_allclose(
        permuted.avg_weights.data, base.avg_weights.data[:, perm], atol=1e-12
    )
    np.testing.assert_allclose(permuted.updated.data, base.updated.data, atol=1e-12)


def test_mha_rows_are_distributions():
    rng = np.random.default_rng(3)
    for _ in range(20):
        q_n = int(rng.integers(1, 6))
        s_n = int(rng.integers(1, 9))
        p = _mha(rng, 8, 4)
        out = mha_forward(rng.standard_normal((q_n, 8)), rng.standard_normal((s_n, 8)), p)
        w = out.avg_weights.data
        assert (w >= 0).all()
        np.testing.assert_allclose(w.sum(axis=1), np.ones(q_n), atol=1e-9)


def test_mha_dimension_errors():
    rng = np.random.default_rng(4)
    p = _mha(rng, 8, 2)
    with pytest.raises(DimensionError):
        mha_forward(np.ones((2, 7)), np.ones((3, 8)), p)
    with pytest.raises(DimensionError):
        mha_forward(np.ones((2, 8)), np.ones((0, 8)), p)
    with pytest.raises(DimensionError):
        MultiHeadAttention.init(rng, 6, 4)  # heads must divide d_model


def test_attention_output_validates_rows():
    bad = ad.constant(np.array([[0.6, 0.6]]))
    with pytest.raises(ValueError):
        AttentionOutput(updated=ad.constant(np.zeros((1, 2))), avg_weights=bad)
    negative = ad.constant(np.array([[1.5, -0.5]]))
    with pytest.raises(ValueError):
        AttentionOutput(updated=ad.constant(np.zeros((1, 2))), avg_weights=negative)
