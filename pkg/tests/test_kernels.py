"""The compiled and pure-Python kernel backends must agree exactly."""
import numpy as np
import pytest

from ritseg import kernels

backends = kernels.available_backends()
needs_both = pytest.mark.skipif(len(backends) < 2, reason="compiled kernels not built")


def test_python_backend_always_present():
    assert "python" in backends
    assert kernels.BACKEND in backends


@needs_both
def test_edt_backends_agree(rng):
    for _ in range(50):
        mask = rng.random((rng.integers(1, 20), rng.integers(1, 20))) < rng.uniform(0.02, 0.5)
        if not mask.any():
            continue
        m = np.ascontiguousarray(mask.view(np.uint8))
        np.testing.assert_array_equal(backends["cython"].edt_squared(m), backends["python"].edt_squared(m))


@needs_both
def test_nms_and_hysteresis_backends_agree(rng):
    for _ in range(20):
        mag = rng.random((17, 23))
        dirs = rng.integers(0, 4, size=mag.shape).astype(np.int8)
        a = backends["cython"].nms(mag, dirs)
        b = backends["python"].nms(mag, dirs)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(
            backends["cython"].hysteresis(a, 0.3, 0.7), backends["python"].hysteresis(b, 0.3, 0.7)
        )


@needs_both
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("k", [(3, 3), (5, 3), (1, 3)])
def test_conv_backends_agree(rng, dtype, k):
    kh, kw = k
    x = rng.standard_normal((2, 7, 6, 5)).astype(dtype)
    taps = rng.standard_normal((kh * kw, 5, 4)).astype(dtype)
    g = rng.standard_normal((2, 7, 6, 4)).astype(dtype)
    tol = 1e-5 if dtype == np.float32 else 1e-12
    a = backends["cython"].conv_nhwc(x, taps, kh, kw)
    b = backends["python"].conv_nhwc(x, taps, kh, kw)
    assert a.dtype == dtype
    np.testing.assert_allclose(a, b, rtol=tol, atol=tol)
    np.testing.assert_allclose(
        backends["cython"].conv_weight_grad_nhwc(x, g, kh, kw),
        backends["python"].conv_weight_grad_nhwc(x, g, kh, kw),
        rtol=tol,
        atol=tol,
    )


@needs_both
def test_leaky_backends_agree_on_strided_layout(rng):
    x = rng.standard_normal((2, 4, 5, 3)).astype(np.float32).transpose(0, 3, 1, 2)
    g = np.empty_like(x)
    g[...] = rng.standard_normal(x.shape)
    c, p = backends["cython"], backends["python"]
    np.testing.assert_array_equal(c.leaky_relu(x, 0.01), p.leaky_relu(x, 0.01))
    np.testing.assert_array_equal(c.leaky_relu_grad(x, g, 0.01), p.leaky_relu_grad(x, g, 0.01))
