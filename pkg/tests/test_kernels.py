import numpy as np
import pytest
from hypothesis import given, strategies as st

from cardionet import kernels as K
from cardionet.errors import ConfigError, DimensionError
from cardionet.tensor import ConvSpec, RunningStats, Tensor

from oracles import (distinct_values, naive_conv2d, naive_pool2d, naive_transposed_conv2d,
                     numeric_grad, rel_error)

F32 = np.float32


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------------------ Tensor

def test_tensor_invariants():
    t = Tensor(np.arange(6).reshape(2, 3))
    assert t.data.dtype == F32 and t.size == 6 and t.grad is None
    t.accumulate(np.ones((2, 3)))
    t.accumulate(np.ones((2, 3)))
    assert t.grad.shape == t.shape and np.all(t.grad == 2)
    with pytest.raises(DimensionError):
        t.accumulate(np.ones(6))


def test_convspec_validation():
    with pytest.raises(ConfigError):
        ConvSpec(1, 1, 0, 3)
    with pytest.raises(ConfigError):
        ConvSpec(1, 1, 3, 3, stride=0)
    assert ConvSpec(1, 1, 3, 3, 1, 1).conv_output_hw(5, 5) == (5, 5)
    with pytest.raises(ConfigError):
        ConvSpec(1, 1, 2, 2, stride=2).conv_output_hw(5, 5)


# ------------------------------------------------------------------- conv2d

def test_conv2d_worked_example():
    x = np.array([[[[1, 2], [3, 4]]]], F32)
    out = K.conv2d(x, np.ones((1, 1, 2, 2), F32), np.zeros(1, F32))
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 10


def test_conv2d_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 5, 4)).astype(F32)
    out = K.conv2d(x, np.ones((1, 1, 1, 1), F32), np.zeros(1, F32))
    np.testing.assert_array_equal(out, x)


def test_conv2d_zero_input(rng):
    w = rng.standard_normal((3, 2, 3, 3)).astype(F32)
    out = K.conv2d(np.zeros((1, 2, 6, 6), F32), w, np.zeros(3, F32), ConvSpec(2, 3, 3, 3, 1, 1))
    assert not out.any()


def test_conv2d_errors():
    x = np.zeros((1, 2, 4, 4), F32)
    with pytest.raises(DimensionError, match="channel"):
        K.conv2d(x, np.zeros((1, 3, 3, 3), F32))
    with pytest.raises(ConfigError):
        K.conv2d(x, np.zeros((1, 2, 3, 3), F32), None, ConvSpec(2, 1, 3, 3, stride=2))


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
def test_conv2d_matches_oracle(rng, stride, pad):
    for _ in range(5):
        c, f, k = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4)
        h = int(rng.integers(k, 9))
        # pick a width that keeps the output extent integral
        h = h - (h + 2 * pad - k) % stride
        if h < 1 or h + 2 * pad < k:
            continue
        x = rng.standard_normal((2, c, h, h)).astype(F32)
        w = rng.standard_normal((f, c, k, k)).astype(F32)
        b = rng.standard_normal(f).astype(F32)
        got = K.conv2d(x, w, b, ConvSpec(c, f, k, k, stride, pad))
        np.testing.assert_allclose(got, naive_conv2d(x, w, b, stride, pad), atol=1e-5)


def test_conv2d_linearity(rng):
    spec = ConvSpec(2, 3, 3, 3, 1, 1)
    w = rng.standard_normal((3, 2, 3, 3)).astype(F32)
    x, z = rng.standard_normal((2, 2, 2, 6, 6)).astype(F32)
    a, b = 0.7, -1.3
    lhs = K.conv2d(a * x + b * z, w, None, spec)
    rhs = a * K.conv2d(x, w, None, spec) + b * K.conv2d(z, w, None, spec)
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)


def test_conv2d_is_pure(rng):
    x = rng.standard_normal((2, 2, 6, 6)).astype(F32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(F32)
    x0, w0 = x.copy(), w.copy()
    a = K.conv2d(x, w, None, ConvSpec(2, 3, 3, 3, 1, 1))
    b = K.conv2d(x, w, None, ConvSpec(2, 3, 3, 3, 1, 1))
    assert a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(x, x0)
    np.testing.assert_array_equal(w, w0)


# ------------------------------------------------------ transposed conv2d

def test_transposed_conv2d_worked_example():
    x = np.array([[[[1, 2], [3, 4]]]], F32)
    out = K.transposed_conv2d(x, np.ones((1, 1, 2, 2), F32), None, ConvSpec(1, 1, 2, 2, 2, 0))
    expected = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
    np.testing.assert_array_equal(out[0, 0], expected)


def test_transposed_conv2d_zero_and_doubling(rng):
    w = rng.standard_normal((4, 2, 2, 2)).astype(F32)
    spec = ConvSpec(4, 2, 2, 2, 2, 0)
    out = K.transposed_conv2d(np.zeros((1, 4, 16, 16), F32), w, None, spec)
    assert out.shape == (1, 2, 32, 32) and not out.any()
    assert spec.transposed_output_hw(16, 16) == (32, 32)


def test_transposed_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        K.transposed_conv2d(np.zeros((1, 3, 4, 4), F32), np.zeros((2, 1, 2, 2), F32))


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 0), (2, 1), (3, 1)])
def test_transposed_conv2d_matches_oracle(rng, stride, pad):
    for _ in range(5):
        c, f, k = rng.integers(1, 4), rng.integers(1, 4), rng.integers(max(2, pad + 1), 5)
        h = int(rng.integers(1, 6))
        if (h - 1) * stride + k - 2 * pad < 1:
            continue
        x = rng.standard_normal((2, c, h, h)).astype(F32)
        w = rng.standard_normal((c, f, k, k)).astype(F32)
        b = rng.standard_normal(f).astype(F32)
        got = K.transposed_conv2d(x, w, b, ConvSpec(c, f, k, k, stride, pad))
        np.testing.assert_allclose(got, naive_transposed_conv2d(x, w, b, stride, pad), atol=1e-5)


@pytest.mark.parametrize("stride,pad,k,h", [(1, 1, 3, 8), (2, 0, 2, 8), (2, 1, 3, 9)])
def test_conv_transposed_adjoint(rng, stride, pad, k, h):
    c, f = 3, 2
    spec = ConvSpec(c, f, k, k, stride, pad)
    ho, wo = spec.conv_output_hw(h, h)
    w = rng.standard_normal((f, c, k, k))
    x = rng.standard_normal((2, c, h, h))
    y = rng.standard_normal((2, f, ho, wo))
    lhs = np.sum(K.conv2d(x, w, None, spec) * y)
    tspec = ConvSpec(f, c, k, k, stride, pad)
    ty = K.transposed_conv2d(y, w, None, tspec)
    assert ty.shape == x.shape
    rhs = np.sum(x * ty)
    assert abs(lhs - rhs) <= 1e-4 * max(abs(lhs), abs(rhs), 1.0)


# ------------------------------------------------------------------ pooling

def test_pool_worked_examples():
    x = np.array([[[[1, 2], [3, 4]]]], F32)
    assert K.pool2d(x, "max")[0, 0, 0, 0] == 4
    assert K.pool2d(x, "average")[0, 0, 0, 0] == 2.5
    assert K.pool2d(x, "sum")[0, 0, 0, 0] == 10


def test_pool_odd_extent_rejected():
    with pytest.raises(DimensionError):
        K.pool2d(np.zeros((1, 1, 3, 4), F32))


@given(st.floats(-100, 100, allow_nan=False, width=32), st.integers(1, 4))
def test_pool_constant(value, half):
    x = np.full((1, 2, 2 * half, 2 * half), value, F32)
    np.testing.assert_allclose(K.pool2d(x, "average"), value, rtol=1e-6)
    np.testing.assert_allclose(K.pool2d(x, "sum"), 4 * np.float32(value), rtol=1e-6)


@pytest.mark.parametrize("mode", ["max", "average", "sum"])
def test_pool_matches_oracle(rng, mode):
    for _ in range(10):
        h, w = 2 * rng.integers(1, 5, size=2)
        x = rng.standard_normal((2, 3, h, w)).astype(F32)
        np.testing.assert_allclose(K.pool2d(x, mode), naive_pool2d(x, mode), atol=1e-5)


def test_maxpool_backward_routes_to_argmax(rng):
    x = rng.standard_normal((2, 3, 6, 8))
    out, idx = K.pool2d(x, "max", return_indices=True)
    dout = rng.standard_normal(out.shape)
    dx = K.pool2d_backward(dout, x.shape, "max", idx)
    # brute force: each window gets its gradient at its max position only
    for n in range(2):
        for c in range(3):
            for y in range(3):
                for z in range(4):
                    win = x[n, c, 2 * y:2 * y + 2, 2 * z:2 * z + 2]
                    g = dx[n, c, 2 * y:2 * y + 2, 2 * z:2 * z + 2]
                    a, b = np.unravel_index(np.argmax(win), (2, 2))
                    assert g[a, b] == dout[n, c, y, z]
                    assert np.count_nonzero(g) <= 1


# -------------------------------------------------------------- activations

def test_relu_and_sigmoid_values():
    np.testing.assert_array_equal(K.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    assert K.sigmoid(np.float64(0.0)) == 0.5
    np.testing.assert_array_equal(K.relu_backward(np.ones(2), np.array([-1.0, 2.0])), [0, 1])


@given(st.floats(-50, 50, allow_nan=False))
def test_sigmoid_symmetry(x):
    s = K.sigmoid(np.array([x, -x]))
    assert abs(s[0] + s[1] - 1) < 1e-12
    assert 0 < s[0] < 1 and 0 < s[1] < 1


def test_sigmoid_open_interval_float32():
    s = K.sigmoid(np.array([-200, -30, 30, 200], F32))
    assert s.dtype == F32 and np.all(s > 0) and np.all(s < 1)


# ---------------------------------------------------------------- batch norm

def test_batch_norm_examples():
    g, b = np.ones(1), np.zeros(1)
    out, _ = K.batch_norm(np.full((2, 1, 2, 2), 3.0), g, b)
    assert np.all(out == 0)
    out, _ = K.batch_norm(np.array([1.0, 3.0]).reshape(2, 1, 1, 1), g, b, eps=1e-12)
    np.testing.assert_allclose(out.ravel(), [-1, 1], atol=1e-9)
    rng = np.random.default_rng(0)
    beta = np.array([0.3, -2.0])
    out, _ = K.batch_norm(rng.standard_normal((3, 2, 2, 2)), np.zeros(2), beta)
    np.testing.assert_allclose(out, np.broadcast_to(beta.reshape(1, 2, 1, 1), out.shape))


def test_batch_norm_running_stats_and_eval(rng):
    stats = RunningStats.fresh(2)
    x = rng.standard_normal((4, 2, 3, 3)).astype(F32) * 2 + 5
    K.batch_norm(x, np.ones(2, F32), np.zeros(2, F32), mode="train", stats=stats)
    m = x.mean(axis=(0, 2, 3))
    v = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(stats.mean, 0.1 * m, rtol=1e-5)
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * v, rtol=1e-5)
    out, _ = K.batch_norm(x, np.ones(2, F32), np.zeros(2, F32), mode="eval", stats=stats)
    expected = (x - stats.mean.reshape(1, 2, 1, 1)) / np.sqrt(stats.var.reshape(1, 2, 1, 1) + 1e-5)
    np.testing.assert_allclose(out, expected, rtol=1e-5, atol=1e-5)


def test_batch_norm_empty_slab():
    with pytest.raises(DimensionError):
        K.batch_norm(np.zeros((0, 1, 2, 2)), np.ones(1), np.zeros(1))


# --------------------------------------------------------- dense and concat

def test_dense_examples():
    x = np.array([[1.0, 2.0]])
    np.testing.assert_array_equal(K.dense(x, np.eye(2), np.zeros(2)), x)
    np.testing.assert_array_equal(K.dense(x, np.array([[1.0], [1.0]]), np.array([0.5])), [[3.5]])
    b = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(K.dense(np.zeros((4, 5)), np.ones((5, 3)), b), np.tile(b, (4, 1)))
    with pytest.raises(DimensionError):
        K.dense(x, np.ones((3, 1)), np.zeros(1))


def test_concat_roundtrip(rng):
    a = rng.standard_normal((2, 2, 4, 4))
    b = rng.standard_normal((2, 3, 4, 4))
    c = K.concat_channels(a, b)
    assert c.shape == (2, 5, 4, 4)
    np.testing.assert_array_equal(c[:, :2], a)
    np.testing.assert_array_equal(c[:, 2:], b)
    with pytest.raises(DimensionError):
        K.concat_channels(a, rng.standard_normal((2, 3, 4, 5)))


def test_concat_then_select_conv(rng):
    x = rng.standard_normal((1, 3, 5, 5)).astype(F32)
    c = K.concat_channels(x, np.zeros((1, 2, 5, 5), F32))
    w = np.zeros((3, 5, 1, 1), F32)
    w[[0, 1, 2], [0, 1, 2]] = 1
    np.testing.assert_array_equal(K.conv2d(c, w, np.zeros(3, F32)), x)


def test_concat_unet_level_width():
    c = K.concat_channels(np.zeros((1, 256, 4, 4), F32), np.zeros((1, 256, 4, 4), F32))
    assert c.shape[1] == 512


def test_center_crop_tensor():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(K.center_crop_tensor(x, 2, 2)[0, 0], [[5, 6], [9, 10]])
    np.testing.assert_array_equal(K.center_crop_tensor(x, 3, 3)[0, 0], x[0, 0, :3, :3])


# ---------------------------------------------------------------- gradients

def _gradcheck(forward, inputs, rng):
    """Compare analytic grads (from ``forward`` returning (out, backward_fn)) against finite differences."""
    out, backward = forward()
    r = rng.standard_normal(out.shape)
    analytic = backward(r)

    def loss():
        return float(np.sum(forward()[0] * r))

    return [rel_error(a, numeric_grad(loss, x)) for a, x in zip(analytic, inputs)]


def test_relu_gradient_at_points():
    g = K.relu_backward(np.ones(2), np.array([-1.0, 2.0]))
    assert list(g) == [0.0, 1.0]


def test_conv2d_gradients_finite_difference(rng):
    x = rng.standard_normal((1, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    spec = ConvSpec(2, 3, 3, 3, 1, 1)
    errs = _gradcheck(lambda: (K.conv2d(x, w, b, spec),
                               lambda d: K.conv2d_backward(d, x, w, spec)), [x, w, b], rng)
    assert max(errs) < 1e-3, errs


def test_backward_gradient_of_sum_is_sum_of_gradients(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((2, 2, 3, 3))
    spec = ConvSpec(2, 2, 3, 3, 1, 0)
    d1 = rng.standard_normal((1, 2, 3, 3))
    d2 = rng.standard_normal((1, 2, 3, 3))
    g1 = K.conv2d_backward(d1, x, w, spec)
    g2 = K.conv2d_backward(d2, x, w, spec)
    g12 = K.conv2d_backward(d1 + d2, x, w, spec)
    for a, b, c in zip(g1, g2, g12):
        np.testing.assert_allclose(a + b, c, atol=1e-12)


def test_float64_is_preserved(rng):
    x = rng.standard_normal((1, 1, 4, 4))
    assert K.conv2d(x, np.ones((1, 1, 3, 3)), None).dtype == np.float64
    assert K.pool2d(x).dtype == np.float64
    assert distinct_values(rng, (2, 2)).dtype == np.float64
