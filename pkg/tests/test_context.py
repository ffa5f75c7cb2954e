import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from master_str.context import (
    MagcParams,
    gc_block,
    init_gc,
    init_magc,
    magc_attend,
    magc_block,
    pool_weights,
)
from master_str.errors import ConfigurationError
from master_str.tensor import Tensor


def loop_delta(z, b):
    hid = b.w1.data @ z + b.b1.data
    mu = hid.mean()
    var = ((hid - mu) ** 2).mean()
    hid = (hid - mu) / math.sqrt(var + 1e-5) * b.ln_g.data + b.ln_b.data
    return b.w2.data @ np.maximum(hid, 0) + b.b2.data


def loop_group_context(x, wk, scale):
    c, hh, ww = x.shape
    heads, dh = wk.shape
    ctx = np.zeros(c)
    for g in range(heads):
        rows = slice(g * dh, (g + 1) * dh)
        positions = [(i, j) for i in range(hh) for j in range(ww)]
        logits = [scale * float(wk[g] @ x[rows, i, j]) for i, j in positions]
        top = max(logits)
        w = [math.exp(z - top) for z in logits]
        total = sum(w)
        for (i, j), wj in zip(positions, w):
            ctx[rows] += wj / total * x[rows, i, j]
    return ctx


def test_gc_zero_transform_is_residual_only():
    rng = np.random.default_rng(0)
    p = init_gc(8, 2, rng)
    p.transform.w2.data[:] = 0
    p.transform.b2.data[:] = 0
    x = rng.normal(size=(8, 3, 4))
    np.testing.assert_array_equal(gc_block(Tensor(x), p).data, x)


def test_constant_map_gives_uniform_weights():
    rng = np.random.default_rng(1)
    p = init_gc(4, 2, rng)
    x = np.ones((1, 4, 3, 5)) * rng.normal(size=(1, 4, 1, 1))
    alpha = pool_weights(Tensor(x), p.wk, 1.0).data
    np.testing.assert_allclose(alpha, 1 / 15, atol=1e-15)


def test_gc_block_matches_position_loop():
    rng = np.random.default_rng(2)
    p = init_gc(4, 2, rng)
    x = rng.normal(size=(4, 3, 5))
    want = x + loop_delta(loop_group_context(x, p.wk.data, 1.0), p.transform)[:, None, None]
    np.testing.assert_allclose(gc_block(Tensor(x), p).data, want, atol=1e-9)


def test_gc_ratio_must_divide():
    with pytest.raises(ConfigurationError):
        init_gc(6, 4, np.random.default_rng(0))


def test_magc_h1_single_pool_with_root_c_scale():
    rng = np.random.default_rng(3)
    p = init_magc(8, 1, 2, rng)
    x = rng.normal(size=(8, 2, 3))
    want = loop_group_context(x, p.wk.data, 1 / math.sqrt(8))
    np.testing.assert_allclose(magc_attend(Tensor(x), p).data, want, atol=1e-12)


def test_default_group_width():
    p = init_magc(512, 8, 16, np.random.default_rng(0))
    assert p.group_width == 64
    assert p.transform.w1.shape == (32, 512)


def test_magc_attend_matches_group_loop():
    rng = np.random.default_rng(4)
    p = init_magc(8, 2, 2, rng)
    x = rng.normal(size=(8, 2, 3))
    want = loop_group_context(x, p.wk.data, 1 / 2)
    np.testing.assert_allclose(magc_attend(Tensor(x), p).data, want, atol=1e-9)


def test_magc_heads_must_divide():
    with pytest.raises(ConfigurationError):
        init_magc(8, 3, 2, np.random.default_rng(0))
    p = init_magc(8, 2, 2, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        magc_attend(Tensor(np.ones((8, 2, 2))), MagcParams(3, p.wk, p.transform, 2))


def test_magc_h0_is_identity():
    p = init_magc(8, 0, 2, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).normal(size=(8, 3, 3)))
    assert magc_block(x, p) is x


def test_magc_zero_delta_is_identity():
    rng = np.random.default_rng(5)
    p = init_magc(8, 4, 2, rng)
    p.transform.w2.data[:] = 0
    p.transform.b2.data[:] = 0
    x = rng.normal(size=(8, 3, 3))
    np.testing.assert_array_equal(magc_block(Tensor(x), p).data, x)


def test_magc_block_matches_composed_oracle():
    rng = np.random.default_rng(6)
    p = init_magc(16, 4, 4, rng)
    x = rng.normal(size=(16, 3, 4))
    ctx = loop_group_context(x, p.wk.data, 1 / 2)
    want = x + loop_delta(ctx, p.transform)[:, None, None]
    np.testing.assert_allclose(magc_block(Tensor(x), p).data, want, atol=1e-9)


def test_magc_batched_matches_single():
    rng = np.random.default_rng(7)
    p = init_magc(8, 4, 2, rng)
    x = rng.normal(size=(3, 8, 2, 5))
    batched = magc_block(Tensor(x), p).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], magc_block(Tensor(x[i]), p).data, atol=1e-13)


def test_gc_equals_magc_h1_with_unit_scale():
    rng = np.random.default_rng(8)
    gc = init_gc(8, 2, rng)
    magc = MagcParams(heads=1, wk=gc.wk, transform=gc.transform, ratio=2, logit_scale=1.0)
    x = Tensor(rng.normal(size=(8, 3, 4)))
    np.testing.assert_allclose(magc_block(x, magc).data, gc_block(x, gc).data, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([1, 2, 4, 8]), st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_group_weights_sum_to_one(heads, hh, ww, seed):
    rng = np.random.default_rng(seed)
    p = init_magc(8, heads, 2, rng)
    x = Tensor(rng.normal(size=(2, 8, hh, ww)) * 4)
    alpha = pool_weights(x, p.wk, 1 / math.sqrt(8 // heads)).data
    assert alpha.shape == (2, heads, 1, hh * ww)
    assert np.max(np.abs(alpha.sum(axis=-1) - 1)) <= 1e-9


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([1, 2, 4]), st.integers(0, 2**31 - 1))
def test_magc_permutation_equivariance(heads, seed):
    rng = np.random.default_rng(seed)
    p = init_magc(8, heads, 2, rng)
    x = rng.normal(size=(8, 3, 4))
    perm = rng.permutation(12)
    px = x.reshape(8, 12)[:, perm].reshape(8, 3, 4)
    y = magc_block(Tensor(x), p).data.reshape(8, 12)[:, perm].reshape(8, 3, 4)
    py = magc_block(Tensor(px), p).data
    assert np.max(np.abs(py - y)) <= 1e-9
    assert py.shape == x.shape
