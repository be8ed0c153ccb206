import numpy as np
import pytest

from fgfp.errors import DimensionError, NumericError
from fgfp.ndcore import Grad, conv2d_backward, conv2d_forward, im2col, sgd_step, substream, tensor

from helpers import central_diff, conv2d_brute_force


def test_conv_all_ones_sums_to_nine():
    x = np.ones((1, 1, 3, 3), dtype=np.float32)
    k = np.ones((1, 1, 3, 3), dtype=np.float32)
    out = conv2d_forward(x, k, 1, 0)
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 9.0


def test_conv_zero_kernel_annihilates(rng):
    x = rng.normal(size=(2, 3, 6, 5)).astype(np.float32)
    k = np.zeros((4, 3, 3, 3), dtype=np.float32)
    assert not conv2d_forward(x, k, 1, 1).any()


def test_conv_hand_case_stride_two():
    # 4x4 input 1..16, kernel [[1,0],[0,1]], stride 2: each output is the
    # sum of a window's main diagonal
    x = tensor((1, 1, 4, 4), np.arange(1, 17, dtype=np.float32))
    k = tensor((1, 1, 2, 2), [1, 0, 0, 1])
    out = conv2d_forward(x, k, 2, 0)
    np.testing.assert_array_equal(out[0, 0], [[7.0, 11.0], [23.0, 27.0]])


@pytest.mark.parametrize("case", range(6))
def test_conv_matches_brute_force(case):
    rng = np.random.default_rng(100 + case)
    n, cin, cout = rng.integers(1, 4, size=3)
    kh, kw = rng.integers(1, 4, size=2)
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    h = int(rng.integers(kh, kh + 5))
    w = int(rng.integers(kw, kw + 5))
    x = rng.normal(size=(n, cin, h, w))
    k = rng.normal(size=(cout, cin, kh, kw))
    got = conv2d_forward(x, k, stride, pad)
    want = conv2d_brute_force(x, k, stride, pad)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv_identity_1x1_kernel(rng):
    x = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
    k = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(conv2d_forward(x, k), x)


def test_conv_channel_mismatch_raises(rng):
    x = rng.normal(size=(1, 3, 5, 5)).astype(np.float32)
    k = rng.normal(size=(2, 4, 3, 3)).astype(np.float32)
    with pytest.raises(DimensionError):
        conv2d_forward(x, k)


def test_conv_kernel_larger_than_padded_input_raises():
    x = np.ones((1, 1, 2, 2), dtype=np.float32)
    k = np.ones((1, 1, 5, 5), dtype=np.float32)
    with pytest.raises(DimensionError):
        conv2d_forward(x, k, 1, 0)


def test_conv_deterministic(rng):
    x = rng.normal(size=(2, 4, 9, 9)).astype(np.float32)
    k = rng.normal(size=(3, 4, 3, 3)).astype(np.float32)
    a = conv2d_forward(x, k, 2, 1)
    b = conv2d_forward(x, k, 2, 1)
    assert np.array_equal(a, b)


def test_backward_zero_grad_out(rng):
    x = rng.normal(size=(1, 2, 4, 4)).astype(np.float32)
    k = rng.normal(size=(2, 2, 2, 2)).astype(np.float32)
    gi, gk = conv2d_backward(np.zeros((1, 2, 3, 3), dtype=np.float32), x, k)
    assert not gi.any() and not gk.any()


def test_backward_1x1_kernel_closed_form(rng):
    # y = w * x elementwise per channel pair; sum-loss kernel grad is the
    # total input-grad_out correlation
    x = rng.normal(size=(2, 1, 4, 4))
    k = rng.normal(size=(1, 1, 1, 1))
    g = rng.normal(size=(2, 1, 4, 4))
    gi, gk = conv2d_backward(g, x, k)
    np.testing.assert_allclose(gk[0, 0, 0, 0], np.sum(x * g), rtol=1e-12)
    np.testing.assert_allclose(gi, g * k[0, 0, 0, 0], rtol=1e-12)


@pytest.mark.parametrize("dtype,eps,tol", [(np.float32, 1e-2, 1e-3), (np.float64, 1e-6, 1e-6)])
def test_backward_matches_finite_differences(dtype, eps, tol):
    for case in range(5):
        rng = np.random.default_rng(200 + case)
        n, cin, cout = (int(v) for v in rng.integers(1, 3, size=3))
        kh, kw = (int(v) for v in rng.integers(1, 4, size=2))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        h = int(rng.integers(kh, kh + 3))
        w = int(rng.integers(kw, kw + 3))
        x = rng.normal(size=(n, cin, h, w)).astype(dtype)
        k = rng.normal(size=(cout, cin, kh, kw)).astype(dtype)
        grad_out = np.ones(conv2d_forward(x, k, stride, pad).shape, dtype=dtype)
        gi, gk = conv2d_backward(grad_out, x, k, stride, pad)

        fd_gi = central_diff(lambda xx: conv2d_forward(xx.astype(dtype), k, stride, pad).sum(), x, eps)
        fd_gk = central_diff(lambda kk: conv2d_forward(x, kk.astype(dtype), stride, pad).sum(), k, eps)
        np.testing.assert_allclose(gi, fd_gi, rtol=tol, atol=tol)
        np.testing.assert_allclose(gk, fd_gk, rtol=tol, atol=tol)


def test_backward_accepts_cached_cols(rng):
    x = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
    k = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    g = rng.normal(size=(2, 4, 6, 6)).astype(np.float32)
    cols = im2col(x, 3, 3, 1, 1)
    gi1, gk1 = conv2d_backward(g, x, k, 1, 1)
    gi2, gk2 = conv2d_backward(g, x, k, 1, 1, cols=cols)
    assert np.array_equal(gi1, gi2) and np.array_equal(gk1, gk2)


def test_sgd_basic_step():
    p = np.array([1.0], dtype=np.float32)
    g = np.array([1.0], dtype=np.float32)
    buf = np.zeros(1, dtype=np.float32)
    p2, _ = sgd_step(p, g, 0.1, buf, 0.0)
    np.testing.assert_allclose(p2, [0.9], rtol=1e-7)
    assert p[0] == 1.0  # inputs untouched


def test_sgd_zero_grad_keeps_params(rng):
    p = rng.normal(size=7).astype(np.float32)
    p2, _ = sgd_step(p, np.zeros(7, dtype=np.float32), 0.5, np.zeros(7, dtype=np.float32))
    np.testing.assert_array_equal(p2, p)


def test_sgd_momentum_recurrence():
    # two unit-gradient steps at momentum 0.9: buf 1 then 1.9
    p = np.array([0.0])
    buf = np.zeros(1)
    g = np.array([1.0])
    p, buf = sgd_step(p, g, 0.1, buf, 0.9)
    assert buf[0] == 1.0
    p, buf = sgd_step(p, g, 0.1, buf, 0.9)
    np.testing.assert_allclose(buf, [1.9])
    np.testing.assert_allclose(p, [-0.1 * (1.0 + 1.9)])


def test_sgd_nonfinite_grad_aborts():
    with pytest.raises(NumericError):
        sgd_step(np.zeros(2), np.array([1.0, np.nan]), 0.1, np.zeros(2))


def test_grad_shape_validation(rng):
    with pytest.raises(DimensionError):
        Grad(value=np.zeros((2, 3)), gradient=np.zeros((3, 2)))


def test_tensor_shape_validation():
    with pytest.raises(DimensionError):
        tensor((2, 3), [1.0, 2.0])
    with pytest.raises(DimensionError):
        tensor((0, 3), [])


def test_substream_independent_and_reproducible():
    a1 = substream(7, "alpha").normal(size=4)
    a2 = substream(7, "alpha").normal(size=4)
    b = substream(7, "beta").normal(size=4)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b)
