import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from helpers import check_op_grad
from scipy.special import erf

from hint import tensor as T
from hint.errors import DimensionError, NumericError, UsageError
from hint.tensor import Tensor


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# -- matmul ---------------------------------------------------------------------------
def test_matmul_identity_and_hand_arithmetic():
    m = np.array([[2.0, -1.0], [0.5, 3.0]])
    assert np.array_equal((t64(np.eye(2)) @ t64(m)).data, m)
    out = t64([[1, 2], [3, 4]]) @ t64([[5], [6]])
    assert out.data.tolist() == [[17.0], [39.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        t64(np.ones((2, 3))) @ t64(np.ones((2, 3)))


def test_matmul_gradient_matches_differences(rng):
    err = check_op_grad(lambda a, b: a @ b, [rng.standard_normal((4, 3)), rng.standard_normal((3, 5))])
    assert err < 1e-6


# -- conv2d ---------------------------------------------------------------------------
def loop_conv(x, w, b=None, stride=1, padding=0, groups=1):
    """Direct nested-loop cross-correlation."""
    c_in, h, wd = x.shape
    c_out, cin_g, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    per = c_out // groups
    for o in range(c_out):
        g = o // per
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for ci in range(cin_g):
                    for u in range(kh):
                        for v in range(kw):
                            acc += w[o, ci, u, v] * xp[g * cin_g + ci, i * stride + u, j * stride + v]
                out[o, i, j] = acc + (0.0 if b is None else b[o])
    return out


def test_conv_pointwise_identity_kernel(rng):
    x = rng.standard_normal((3, 5, 4))
    w = np.eye(3)[:, :, None, None]
    assert np.array_equal(T.conv2d(t64(x), t64(w)).data, x)


def test_conv_counting_taps():
    out = T.conv2d(t64(np.ones((1, 3, 3))), t64(np.ones((1, 1, 3, 3))), padding=1).data[0]
    assert out[1, 1] == 9.0
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0
    assert out[0, 1] == 6.0


@pytest.mark.parametrize("c_in,c_out,k,pad,stride,groups", [
    (3, 4, 3, 1, 1, 1),     # dense 3x3
    (4, 4, 3, 1, 1, 4),     # depthwise
    (4, 6, 1, 0, 1, 2),     # grouped pointwise
    (2, 3, 3, 0, 2, 1),     # strided, no padding
])
def test_conv_matches_loop_oracle(rng, c_in, c_out, k, pad, stride, groups):
    x = rng.standard_normal((c_in, 6, 5))
    w = rng.standard_normal((c_out, c_in // groups, k, k))
    b = rng.standard_normal(c_out)
    fast = T.conv2d(t64(x), t64(w), t64(b), stride=stride, padding=pad, groups=groups).data
    np.testing.assert_allclose(fast, loop_conv(x, w, b, stride, pad, groups), rtol=0, atol=1e-12)


@pytest.mark.parametrize("k,pad,stride,groups", [(3, 1, 1, 1), (3, 1, 1, 2), (1, 0, 1, 1), (3, 0, 2, 1)])
def test_conv_gradient(rng, k, pad, stride, groups):
    x = rng.standard_normal((2, 5, 5))
    w = rng.standard_normal((2, 2 // groups, k, k))
    b = rng.standard_normal(2)
    err = check_op_grad(lambda x, w, b: T.conv2d(x, w, b, stride, pad, groups), [x, w, b])
    assert err < 1e-5


def test_conv_rejects_bad_groups():
    with pytest.raises(DimensionError):
        T.conv2d(t64(np.ones((3, 4, 4))), t64(np.ones((2, 1, 1, 1))), groups=2)
    with pytest.raises(DimensionError):
        T.conv2d(t64(np.ones((1, 2, 2))), t64(np.ones((1, 1, 3, 3))))


# -- softmax ----------------------------------------------------------------------------
def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(t64([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(T.softmax(t64([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)
    big = T.softmax(t64([1000.0, 1001.0])).data
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, T.softmax(t64([0.0, 1.0])).data, rtol=1e-14)
    np.testing.assert_allclose(big, [0.2689414213699951, 0.7310585786300049], atol=1e-12)


def test_softmax_non_finite_input_raises():
    with pytest.raises(NumericError):
        T.softmax(t64([0.0, np.nan]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    y = T.softmax(t64(x), axis=-1).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(T.softmax(t64(x + c), axis=-1).data, y, atol=1e-6)


def test_softmax_gradient(rng):
    assert check_op_grad(lambda a: T.softmax(a, axis=-1), [rng.standard_normal((3, 4))]) < 1e-5
    assert check_op_grad(lambda a: T.softmax(a, axis=0), [rng.standard_normal((3, 4))]) < 1e-5


# -- gelu / layer norm / pixel ops -----------------------------------------------------------
def test_gelu_values():
    assert T.gelu(t64(0.0)).item() == 0.0
    assert T.gelu(t64(1.0)).item() == pytest.approx(0.5 * (1 + erf(1 / math.sqrt(2))), abs=1e-15)
    assert T.gelu(t64(1.0)).item() == pytest.approx(0.8413, abs=5e-5)


def test_elementwise_gradients(rng):
    a = rng.standard_normal((3, 4))
    b = rng.uniform(0.5, 2.0, (3, 4))
    for build in (T.gelu, T.exp, lambda x: x * x, lambda x: -x, lambda x: x ** 3.0):
        assert check_op_grad(build, [a]) < 1e-6
    for build in (lambda x, y: x + y, lambda x, y: x - y, lambda x, y: x * y, lambda x, y: x / y):
        assert check_op_grad(build, [a, b]) < 1e-6
    away = a + np.sign(a) * 0.1  # keep |x| off its kink
    assert check_op_grad(T.tabs, [away]) < 1e-6


def test_broadcast_gradients(rng):
    a = rng.standard_normal((3, 4))
    assert check_op_grad(lambda x, y: x * y + y, [a, rng.standard_normal(4)]) < 1e-6
    assert check_op_grad(lambda x, y: x / y, [a, rng.uniform(1, 2, (3, 1))]) < 1e-6


def test_layer_norm_statistics(rng):
    x = t64(rng.standard_normal((6, 4, 5)) * 3 + 2)
    y = T.layer_norm(x, t64(np.ones(6)), t64(np.zeros(6))).data
    assert np.abs(y.mean(axis=0)).max() < 1e-6
    assert np.abs(y.var(axis=0) - 1).max() < 1e-5


def test_layer_norm_gradient(rng):
    args = [rng.standard_normal((4, 3, 2)), rng.standard_normal(4), rng.standard_normal(4)]
    assert check_op_grad(T.layer_norm, args) < 1e-5


def test_l2_normalize_and_gradient(rng):
    x = rng.standard_normal((3, 7))
    y = T.l2_normalize(t64(x), axis=-1).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), 1.0, atol=1e-14)
    assert check_op_grad(lambda a: T.l2_normalize(a, axis=-1), [x]) < 1e-5


def test_pixel_shuffle_inverse_pair(rng):
    x = rng.standard_normal((3, 4, 6))
    assert np.array_equal(T.pixel_shuffle(T.pixel_unshuffle(t64(x), 2), 2).data, x)
    y = rng.standard_normal((8, 2, 3))
    assert np.array_equal(T.pixel_unshuffle(T.pixel_shuffle(t64(y), 2), 2).data, y)


def test_pixel_unshuffle_channel_layout():
    x = np.arange(16.0).reshape(1, 4, 4)
    out = T.pixel_unshuffle(t64(x), 2).data
    # channel i*2+j holds pixels at offset (i, j) of each 2x2 block
    assert out[0].tolist() == [[0, 2], [8, 10]]
    assert out[1].tolist() == [[1, 3], [9, 11]]
    assert out[2].tolist() == [[4, 6], [12, 14]]


def test_pixel_ops_divisibility_and_gradient(rng):
    with pytest.raises(DimensionError):
        T.pixel_unshuffle(t64(np.ones((1, 3, 4))))
    with pytest.raises(DimensionError):
        T.pixel_shuffle(t64(np.ones((3, 2, 2))))
    assert check_op_grad(lambda a: T.pixel_unshuffle(a, 2), [rng.standard_normal((2, 4, 4))]) < 1e-6


def test_indexing_reshape_concat_gradients(rng):
    a = rng.standard_normal((4, 6))
    assert check_op_grad(lambda x: x[1:3], [a]) < 1e-6
    assert check_op_grad(lambda x: T.take(x, [2, 0, 3, 1], axis=0), [a]) < 1e-6
    assert check_op_grad(lambda x: x.reshape(3, 8).T, [a]) < 1e-6
    assert check_op_grad(lambda x, y: T.concat([x, y], axis=0), [a, rng.standard_normal((2, 6))]) < 1e-6
    assert check_op_grad(lambda x: x.sum(axis=0) + x.mean(axis=1).sum(), [a]) < 1e-6


# -- backward contract -----------------------------------------------------------------------
def test_backward_polynomials():
    w = t64(np.array([[1.0, -2.0], [3.0, 0.5]]), grad=True)
    w.sum().backward()
    assert np.array_equal(w.grad, np.ones((2, 2)))
    w.zero_grad()
    (w * w).sum().backward()
    assert np.array_equal(w.grad, 2 * w.data)


def test_backward_accumulates_without_zeroing():
    w = t64([1.0, 2.0], grad=True)
    (w * 3.0).sum().backward()
    (w * 3.0).sum().backward()
    assert w.grad.tolist() == [6.0, 6.0]


def test_backward_reused_node_visited_once():
    w = t64([2.0], grad=True)
    y = w * w
    (y + y).sum().backward()
    assert w.grad.tolist() == [8.0]


def test_backward_requires_scalar():
    w = t64([1.0, 2.0], grad=True)
    with pytest.raises(UsageError):
        (w * 2.0).backward()


def test_no_grad_builds_no_graph():
    w = t64([1.0], grad=True)
    with T.no_grad():
        y = w * 2.0
    assert not y.requires_grad


def test_default_dtype_and_scalar_results_keep_precision():
    assert T.get_default_dtype() == np.float32
    with T.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
    # reductions of float64 data must stay float64 even though numpy returns a scalar
    assert t64([1.0, 2.0]).mean().dtype == np.float64


def test_mac_counter():
    with T.count_macs() as tally:
        t64(np.ones((2, 3))) @ t64(np.ones((3, 4)))
    assert tally["matmul"] == 24
