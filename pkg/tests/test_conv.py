"""Convolution forward/backward against the naive-loop oracle and finite
differences, on both evaluation paths."""

import numpy as np
import pytest

from printkind import engine
from printkind.engine import conv2d_backward, conv2d_forward
from printkind.errors import DataError

from oracles import central_difference, naive_conv2d


@pytest.fixture(params=["direct", "im2col", "fft"])
def conv_path(request):
    engine.FORCE_CONV_PATH = request.param
    yield request.param
    engine.FORCE_CONV_PATH = None


def test_all_zero_input_gives_zero_output(conv_path):
    x = np.zeros((1, 1, 8, 8), dtype=np.float32)
    w = np.random.default_rng(0).standard_normal((4, 1, 3, 3)).astype(np.float32)
    b = np.zeros(4, dtype=np.float32)
    y, _ = conv2d_forward(x, w, b, "same")
    assert y.shape == (1, 4, 8, 8)
    np.testing.assert_array_equal(y, 0)


def test_identity_kernel_preserves_input(conv_path):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 1, 5, 7)).astype(np.float32)
    w = np.ones((1, 1, 1, 1), dtype=np.float32)
    b = np.zeros(1, dtype=np.float32)
    y, _ = conv2d_forward(x, w, b, "same")
    np.testing.assert_allclose(y[:, 0], x[:, 0], atol=1e-6)


def test_matches_naive_oracle_reference_case(conv_path):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 2, 7, 7)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    y, _ = conv2d_forward(x, w, b, "same")
    expected = naive_conv2d(x, w, b, "same")
    np.testing.assert_allclose(y, expected, atol=1e-5)


@pytest.mark.parametrize("kernel", [1, 2, 3, 4, 5, 6])
@pytest.mark.parametrize("padding", ["same", "valid"])
def test_matches_naive_oracle_random_shapes(conv_path, kernel, padding):
    rng = np.random.default_rng(100 + kernel)
    for case in range(4):
        h = int(rng.integers(kernel, 10))
        wdt = int(rng.integers(kernel, 10))
        c = int(rng.integers(1, 4))
        k = int(rng.integers(1, 4))
        n = int(rng.integers(1, 3))
        x = rng.standard_normal((n, c, h, wdt)).astype(np.float32)
        w = rng.standard_normal((k, c, kernel, kernel)).astype(np.float32)
        b = rng.standard_normal(k).astype(np.float32)
        y, _ = conv2d_forward(x, w, b, padding)
        expected = naive_conv2d(x, w, b, padding)
        np.testing.assert_allclose(y, expected, atol=1e-5)


def test_same_padding_preserves_dims_for_table_kernels(conv_path):
    # Full set of kernel sizes used by the shipped presets.
    rng = np.random.default_rng(3)
    for kernel in (2, 3, 4, 6, 10, 11):
        x = rng.standard_normal((1, 1, 16, 16)).astype(np.float32)
        w = rng.standard_normal((2, 1, kernel, kernel)).astype(np.float32)
        b = np.zeros(2, dtype=np.float32)
        y, _ = conv2d_forward(x, w, b, "same")
        assert y.shape == (1, 2, 16, 16), f"kernel {kernel}"


def test_zero_upstream_gradient_gives_zero_gradients(conv_path):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    y, cache = conv2d_forward(x, w, b, "same")
    gx, gw, gb = conv2d_backward(np.zeros_like(y), cache)
    np.testing.assert_allclose(gx, 0, atol=1e-7)
    np.testing.assert_allclose(gw, 0, atol=1e-7)
    np.testing.assert_array_equal(gb, 0)


def test_identity_kernel_backward_passes_gradient_through(conv_path):
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 1, 4, 4)).astype(np.float32)
    w = np.ones((1, 1, 1, 1), dtype=np.float32)
    b = np.zeros(1, dtype=np.float32)
    _, cache = conv2d_forward(x, w, b, "same")
    g = rng.standard_normal((2, 1, 4, 4)).astype(np.float32)
    gx, _, _ = conv2d_backward(g, cache)
    np.testing.assert_allclose(gx, g, atol=1e-6)


@pytest.mark.parametrize("padding", ["same", "valid"])
def test_backward_matches_finite_differences(conv_path, padding):
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, 2, 6, 6))
    w = rng.standard_normal((2, 2, 3, 3))
    b = rng.standard_normal(2)
    weighting = rng.standard_normal(
        (1, 2, 6, 6) if padding == "same" else (1, 2, 4, 4)
    )

    y, cache = conv2d_forward(x, w, b, padding)
    gx, gw, gb = conv2d_backward(weighting, cache)

    def loss_wrt_x(xv):
        out, _ = conv2d_forward(xv, w, b, padding)
        return float((out * weighting).sum())

    def loss_wrt_w(wv):
        out, _ = conv2d_forward(x, wv, b, padding)
        return float((out * weighting).sum())

    def loss_wrt_b(bv):
        out, _ = conv2d_forward(x, w, bv, padding)
        return float((out * weighting).sum())

    for analytic, numeric in [
        (gx, central_difference(loss_wrt_x, x)),
        (gw, central_difference(loss_wrt_w, w)),
        (gb, central_difference(loss_wrt_b, b)),
    ]:
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        assert (np.abs(analytic - numeric) / denom).max() < 1e-4


def test_channel_mismatch_rejected():
    x = np.zeros((1, 2, 4, 4), dtype=np.float32)
    w = np.zeros((1, 3, 3, 3), dtype=np.float32)
    with pytest.raises(DataError, match="channel mismatch"):
        conv2d_forward(x, w, np.zeros(1, dtype=np.float32), "same")


def test_kernel_larger_than_input_rejected_for_valid():
    x = np.zeros((1, 1, 4, 4), dtype=np.float32)
    w = np.zeros((1, 1, 5, 5), dtype=np.float32)
    with pytest.raises(DataError, match="larger than"):
        conv2d_forward(x, w, np.zeros(1, dtype=np.float32), "valid")


def test_non_square_kernel_rejected():
    x = np.zeros((1, 1, 6, 6), dtype=np.float32)
    w = np.zeros((1, 1, 2, 3), dtype=np.float32)
    with pytest.raises(DataError, match="square"):
        conv2d_forward(x, w, np.zeros(1, dtype=np.float32), "same")


def test_grad_shape_mismatch_rejected():
    x = np.zeros((1, 1, 6, 6), dtype=np.float32)
    w = np.zeros((1, 1, 3, 3), dtype=np.float32)
    _, cache = conv2d_forward(x, w, np.zeros(1, dtype=np.float32), "same")
    with pytest.raises(DataError, match="does not match"):
        conv2d_backward(np.zeros((1, 1, 5, 5), dtype=np.float32), cache)


def test_paths_agree_on_large_kernel():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 2, 20, 20)).astype(np.float32)
    w = rng.standard_normal((3, 2, 11, 11)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    engine.FORCE_CONV_PATH = "direct"
    try:
        y_direct, _ = conv2d_forward(x, w, b, "same")
    finally:
        engine.FORCE_CONV_PATH = "fft"
    try:
        y_fft, _ = conv2d_forward(x, w, b, "same")
    finally:
        engine.FORCE_CONV_PATH = None
    np.testing.assert_allclose(y_fft, y_direct, atol=2e-4)
