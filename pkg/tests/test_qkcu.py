import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.ndimage import correlate
from scipy.special import erf

from hint import tensor as T
from hint.attention import hierarchical_partition
from hint.errors import ConfigError, DimensionError
from hint.qkcu import (GATE_IDENTITY_BIAS, InterCache, InterHeadParams, IntraModulation,
                       inter_cache_layer, inter_cache_update, inter_modulate, intra_cache_build,
                       intra_modulate, resize_bilinear)
from hint.tensor import Tensor


def gelu(x):
    return 0.5 * x * (1 + erf(x / math.sqrt(2)))


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# -- intra cache ---------------------------------------------------------------------------
def test_intra_cache_examples(rng):
    q = [rng.standard_normal((2, 6)), rng.standard_normal((3, 6))]
    zero = intra_cache_build([(t(a), t(-a)) for a in q])
    assert np.array_equal(zero.data, np.zeros((5, 6)))
    k = [rng.standard_normal((2, 6)), rng.standard_normal((3, 6))]
    single = intra_cache_build([(t(q[0]), t(k[0]))])
    np.testing.assert_array_equal(single.data, q[0] + k[0])
    both = intra_cache_build([(t(q[0]), t(k[0])), (t(q[1]), t(k[1]))]).data
    assert both.shape == (5, 6)
    np.testing.assert_array_equal(both[:2], q[0] + k[0])
    np.testing.assert_array_equal(both[2:], q[1] + k[1])


def test_intra_cache_errors():
    with pytest.raises(DimensionError):
        intra_cache_build([])
    with pytest.raises(DimensionError):
        intra_cache_build([(t(np.ones((2, 4))), t(np.ones((2, 4)))), (t(np.ones((1, 5))), t(np.ones((1, 5))))])


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_intra_cache_is_linear(a, b, seed):
    r = np.random.default_rng(seed)
    q1, k1, q2, k2 = (r.standard_normal((4, 5)) for _ in range(4))
    lhs = intra_cache_build([(t(a * q1 + b * q2), t(a * k1 + b * k2))]).data
    rhs = a * intra_cache_build([(t(q1), t(k1))]).data + b * intra_cache_build([(t(q2), t(k2))]).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


# -- intra modulate -------------------------------------------------------------------------
def build_intra(c=8, r=4, seed=0):
    with T.default_dtype(np.float64):
        return IntraModulation(c, r).initialize(seed)


def test_intra_modulate_zero_in_zero_out():
    p = build_intra()
    out = intra_modulate(t(np.zeros((8, 4, 4))), t(np.zeros((8, 4, 4))), p)
    assert out.shape == (8, 4, 4)
    assert np.array_equal(out.data, np.zeros((8, 4, 4)))


def test_intra_modulate_matches_step_by_step(rng):
    p = build_intra(seed=2)
    for conv in (p.gate, p.down, p.up):
        conv.bias.data[...] = rng.standard_normal(conv.bias.shape)
    cache, f_out = rng.standard_normal((2, 8, 4, 4))
    fs = cache + f_out
    kernel = p.gate.weight.data[:, 0]
    gate = np.stack([correlate(fs[c], kernel[c], mode="constant") for c in range(8)])
    gate += p.gate.bias.data[:, None, None]
    gated = gelu(gate) * fs
    down = np.einsum("oc,chw->ohw", p.down.weight.data[:, :, 0, 0], gated) + p.down.bias.data[:, None, None]
    up = np.einsum("oc,chw->ohw", p.up.weight.data[:, :, 0, 0], down) + p.up.bias.data[:, None, None]
    got = intra_modulate(t(cache), t(f_out), p).data
    np.testing.assert_allclose(got, up, atol=1e-6)


def test_intra_modulate_shape_mismatch():
    with pytest.raises(DimensionError):
        intra_modulate(t(np.zeros((8, 4, 4))), t(np.zeros((8, 4, 2))), build_intra())
    with pytest.raises(ConfigError):
        IntraModulation(6, 4)


# -- inter modulate ------------------------------------------------------------------------------
def build_inter(n, seed=0):
    with T.default_dtype(np.float64):
        return InterHeadParams(n).initialize(seed)


def test_gate_identity_bias():
    assert gelu(GATE_IDENTITY_BIAS) == pytest.approx(1.0, abs=1e-15)


def test_inter_modulate_identity_at_init(rng):
    f = rng.standard_normal((6, 6))
    p = build_inter(6)
    zero = InterCache.zeros(4)
    assert np.allclose(inter_modulate(zero, t(f), p).data, f, rtol=0, atol=1e-14)
    busy = InterCache(rng.standard_normal((4, 4)))
    assert np.allclose(inter_modulate(busy, t(f), p).data, f, rtol=0, atol=1e-14)
    np.testing.assert_allclose(T.softmax(inter_modulate(zero, t(f), p)).data, T.softmax(t(f)).data, atol=1e-6)


def test_inter_modulate_matches_step_by_step(rng):
    p = build_inter(6, seed=1)
    for prm in (p.scale_weight, p.scale_bias, p.shift_weight, p.shift_bias, p.gate.weight, p.gate.bias):
        prm.data[...] = rng.standard_normal(prm.shape) * 0.5
    cache = InterCache(rng.standard_normal((4, 4)))
    f = rng.standard_normal((6, 6))
    # bilinear, corners aligned: sample the 4x4 grid at 6 evenly spaced positions
    pos = np.linspace(0, 3, 6)
    lo = np.minimum(np.floor(pos).astype(int), 2)
    fr = pos - lo
    rows = cache.map[lo] * (1 - fr)[:, None] + cache.map[lo + 1] * fr[:, None]
    f_hat = rows[:, lo] * (1 - fr)[None, :] + rows[:, lo + 1] * fr[None, :]
    fs = f + f_hat
    f_m = (fs @ p.scale_weight.data + p.scale_bias.data) * f + fs @ p.shift_weight.data + p.shift_bias.data
    g = correlate(f_m, p.gate.weight.data[0, 0], mode="constant") + p.gate.bias.data[0]
    expected = gelu(g) * f_m
    np.testing.assert_allclose(inter_modulate(cache, t(f), p).data, expected, atol=1e-6)


def test_inter_modulate_errors():
    with pytest.raises(DimensionError):
        inter_modulate(InterCache.zeros(4), t(np.zeros((3, 4))), build_inter(3))
    with pytest.raises(DimensionError):
        inter_modulate(InterCache.zeros(4), t(np.zeros((3, 3))), build_inter(4))


def test_modulation_gradients_with_cache_constant(rng):
    """Finite differences over every parameter of both modulations."""
    inter = build_inter(5, seed=4)
    for prm in inter.parameters():
        prm.data += rng.standard_normal(prm.shape) * 0.3
    intra = build_intra(8, 4, seed=4)
    cache = InterCache(rng.standard_normal((4, 4)))
    f = t(rng.standard_normal((5, 5)))
    ic, fo = t(rng.standard_normal((8, 3, 3))), t(rng.standard_normal((8, 3, 3)))
    w1, w2 = rng.standard_normal((5, 5)), rng.standard_normal((8, 3, 3))

    def loss():
        return (inter_modulate(cache, f, inter) * t(w1)).sum() + (intra_modulate(ic, fo, intra) * t(w2)).sum()

    loss().backward()
    eps = 1e-6
    with T.no_grad():
        for mod in (inter, intra):
            for name, p in mod.named_parameters():
                for idx in list(np.ndindex(p.shape))[::3][:5]:
                    orig = p.data[idx]
                    p.data[idx] = orig + eps
                    plus = loss().item()
                    p.data[idx] = orig - eps
                    minus = loss().item()
                    p.data[idx] = orig
                    num = (plus - minus) / (2 * eps)
                    assert abs(p.grad[idx] - num) <= 1e-4 * max(abs(num), 1e-4), name


# -- resize and inter cache ------------------------------------------------------------------------
def test_resize_same_size_is_identity(rng):
    m = rng.standard_normal((5, 5))
    assert np.array_equal(resize_bilinear(m, 5), m)


def test_resize_keeps_corners_and_constants(rng):
    m = rng.standard_normal((4, 4))
    r = resize_bilinear(m, 7)
    for i, j in ((0, 0), (0, -1), (-1, 0), (-1, -1)):
        assert r[i, j] == pytest.approx(m[i, j], abs=1e-14)
    np.testing.assert_allclose(resize_bilinear(np.full((3, 3), 2.5), 8), 2.5, atol=1e-14)


def test_inter_cache_layer_examples():
    p = hierarchical_partition(48, [1, 2, 2, 3])
    assert p.weights == [0.125, 0.25, 0.25, 0.375]
    assert sum(p.weights) == 1.0
    m = np.full((4, 4), 0.7)
    single = hierarchical_partition(4, [1])
    np.testing.assert_array_equal(inter_cache_layer([m], single, 4), m)
    maps = [np.full((s, s), 0.7) for s in p.sizes]
    np.testing.assert_allclose(inter_cache_layer(maps, p, 16), 0.7, atol=1e-14)
    with pytest.raises(DimensionError):
        inter_cache_layer(maps[:2], p, 16)


def test_inter_cache_update_examples(rng):
    m = rng.standard_normal((4, 4))
    cache = InterCache.zeros(4, 0.9)
    inter_cache_update(cache, m)
    np.testing.assert_allclose(cache.map, 0.1 * m, atol=1e-15)
    fixed = InterCache(m.copy(), 0.9)
    inter_cache_update(fixed, m)
    np.testing.assert_allclose(fixed.map, m, atol=1e-15)
    with pytest.raises(DimensionError):
        inter_cache_update(cache, np.zeros((3, 3)))
    with pytest.raises(ConfigError):
        InterCache.zeros(4, 1.5)


@pytest.mark.parametrize("k", [1, 2, 5, 26])
def test_inter_cache_geometric_series(rng, k):
    m = rng.standard_normal((6, 6))
    cache = InterCache.zeros(6, 0.9)
    for _ in range(k):
        inter_cache_update(cache, m)
    np.testing.assert_allclose(cache.map, (1 - 0.9 ** k) * m, atol=1e-6)
    assert cache.updates == k


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.lists(arrays(np.float64, (3, 3), elements=st.floats(-2, 2)), min_size=1, max_size=8))
def test_inter_cache_stays_bounded(alpha, maps):
    cache = InterCache.zeros(3, alpha)
    for m in maps:
        inter_cache_update(cache, m)
        assert np.abs(cache.map).max() <= 2 + 1e-12
