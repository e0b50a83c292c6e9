# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the image kernels.

Every function here has a twin in ``_pykernels`` with identical results;
``ritseg.kernels`` picks one at import time.
"""
import numpy as np

cimport numpy as cnp
from cython cimport floating
from libc.math cimport INFINITY
from scipy.linalg cimport cython_blas as blas

cnp.import_array()


cdef void _envelope_1d(double* f, Py_ssize_t n, Py_ssize_t stride,
                       double* d, Py_ssize_t* v, double* z) noexcept nogil:
    # Lower envelope of parabolas (q - p)^2 + f[p] over finite f[p].
    cdef Py_ssize_t k = -1, p, q
    cdef double s, fp
    for p in range(n):
        fp = f[p * stride]
        if fp == INFINITY:
            continue
        while k >= 0:
            s = ((fp + <double>(p * p)) - (f[v[k] * stride] + <double>(v[k] * v[k]))) / (
                2.0 * <double>(p - v[k]))
            if s <= z[k]:
                k -= 1
            else:
                break
        if k < 0:
            k = 0
            v[0] = p
            z[0] = -INFINITY
        else:
            k += 1
            v[k] = p
            z[k] = s
        z[k + 1] = INFINITY
    if k < 0:
        for q in range(n):
            d[q] = INFINITY
        return
    k = 0
    for q in range(n):
        while z[k + 1] < <double>q:
            k += 1
        d[q] = <double>((q - v[k]) * (q - v[k])) + f[v[k] * stride]


def edt_squared(const unsigned char[:, ::1] mask):
    """Exact squared Euclidean distance of each pixel to the nearest nonzero pixel."""
    cdef Py_ssize_t h = mask.shape[0], w = mask.shape[1], r, c
    cdef Py_ssize_t n = h if h > w else w
    out_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] col = np.empty(n, dtype=np.float64)
    cdef double[::1] tmp = np.empty(n, dtype=np.float64)
    cdef double[::1] z = np.empty(n + 1, dtype=np.float64)
    cdef Py_ssize_t[::1] v = np.empty(n, dtype=np.intp)
    with nogil:
        for c in range(w):
            for r in range(h):
                col[r] = 0.0 if mask[r, c] else INFINITY
            _envelope_1d(&col[0], h, 1, &tmp[0], &v[0], &z[0])
            for r in range(h):
                out[r, c] = tmp[r]
        for r in range(h):
            _envelope_1d(&out[r, 0], w, 1, &tmp[0], &v[0], &z[0])
            for c in range(w):
                out[r, c] = tmp[c]
    return out_arr


def nms(const double[:, ::1] mag, const signed char[:, ::1] dirs):
    """Keep pixels that are ridge maxima along their quantized gradient direction.

    ``dirs`` holds 0 (horizontal), 1 (45 deg), 2 (vertical), 3 (135 deg).
    A pixel survives if it is strictly above the neighbour behind it and not
    below the one ahead, so a flat two-pixel ridge keeps exactly one pixel.
    """
    cdef Py_ssize_t h = mag.shape[0], w = mag.shape[1], r, c
    cdef int dr, dc
    cdef double m, before, after
    out_arr = np.zeros((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for r in range(h):
            for c in range(w):
                m = mag[r, c]
                if m <= 0.0:
                    continue
                if dirs[r, c] == 0:
                    dr = 0
                    dc = 1
                elif dirs[r, c] == 1:
                    dr = 1
                    dc = 1
                elif dirs[r, c] == 2:
                    dr = 1
                    dc = 0
                else:
                    dr = 1
                    dc = -1
                if 0 <= r - dr < h and 0 <= c - dc < w:
                    before = mag[r - dr, c - dc]
                else:
                    before = 0.0
                if 0 <= r + dr < h and 0 <= c + dc < w:
                    after = mag[r + dr, c + dc]
                else:
                    after = 0.0
                if m > before and m >= after:
                    out[r, c] = m
    return out_arr


def hysteresis(const double[:, ::1] mag, double low, double high):
    """Strong pixels (>= high) plus weak pixels (>= low) 8-connected to them."""
    cdef Py_ssize_t h = mag.shape[0], w = mag.shape[1], r, c, rr, cc, top = 0
    cdef Py_ssize_t idx
    cdef int dr, dc
    out_arr = np.zeros((h, w), dtype=np.uint8)
    cdef unsigned char[:, ::1] out = out_arr
    cdef Py_ssize_t[::1] stack = np.empty(h * w + 1, dtype=np.intp)
    with nogil:
        for r in range(h):
            for c in range(w):
                if mag[r, c] >= high and out[r, c] == 0:
                    out[r, c] = 1
                    stack[top] = r * w + c
                    top += 1
                    while top > 0:
                        top -= 1
                        idx = stack[top]
                        rr = idx // w
                        cc = idx - rr * w
                        for dr in range(-1, 2):
                            for dc in range(-1, 2):
                                if 0 <= rr + dr < h and 0 <= cc + dc < w:
                                    if (out[rr + dr, cc + dc] == 0 and mag[rr + dr, cc + dc] >= low
                                            and mag[rr + dr, cc + dc] > 0.0):
                                        out[rr + dr, cc + dc] = 1
                                        stack[top] = (rr + dr) * w + cc + dc
                                        top += 1
    return out_arr


cdef inline void _gemm(char* ta, char* tb, int m, int n, int k, floating* a, int lda,
                       floating* b, int ldb, floating beta, floating* c, int ldc) noexcept nogil:
    # column-major C = op(A) op(B) + beta C
    cdef float s_one = 1.0, s_beta
    cdef double d_one = 1.0, d_beta
    if floating is float:
        s_beta = beta
        blas.sgemm(ta, tb, &m, &n, &k, &s_one, a, &lda, b, &ldb, &s_beta, c, &ldc)
    else:
        d_beta = beta
        blas.dgemm(ta, tb, &m, &n, &k, &d_one, a, &lda, b, &ldb, &d_beta, c, &ldc)


def _pad_flat(x, int kh, int kw):
    n, h, w, c = x.shape
    ph, pw = kh // 2, kw // 2
    wp = w + 2 * pw
    xp = np.zeros((n, h + 2 * ph + 1, wp, c), dtype=x.dtype)
    xp[:, ph : ph + h, pw : pw + w] = x
    return xp.reshape(n, -1, c), wp


def _conv_taps(floating[:, :, ::1] xf, floating[:, :, ::1] wk, floating[:, :, ::1] acc,
               int kh, int kw, int wp):
    cdef int n = xf.shape[0], c = xf.shape[2], co = wk.shape[2], m = acc.shape[1]
    cdef int i, ky, kx, t
    cdef floating beta
    with nogil:
        for i in range(n):
            for t in range(kh * kw):
                ky = t // kw
                kx = t % kw
                beta = 0.0 if t == 0 else 1.0
                _gemm(b"N", b"N", co, m, c, &wk[t, 0, 0], co,
                      &xf[i, ky * wp + kx, 0], c, beta, &acc[i, 0, 0], co)


def _weight_taps(floating[:, :, ::1] xf, floating[:, :, ::1] gf, floating[:, :, ::1] out,
                 int kh, int kw, int wp):
    cdef int n = xf.shape[0], c = xf.shape[2], co = gf.shape[2], m = gf.shape[1]
    cdef int i, ky, kx, t
    cdef floating beta
    with nogil:
        for t in range(kh * kw):
            ky = t // kw
            kx = t % kw
            for i in range(n):
                beta = 0.0 if i == 0 else 1.0
                _gemm(b"N", b"T", co, c, m, &gf[i, 0, 0], co,
                      &xf[i, ky * wp + kx, 0], c, beta, &out[t, 0, 0], co)


def conv_nhwc(x, wk, int kh, int kw):
    """Stride-1 "same" correlation of N,H,W,C input with taps ``wk`` (kh*kw, C, Co)."""
    n, h, w, _ = x.shape
    co = wk.shape[2]
    xf, wp = _pad_flat(x, kh, kw)
    acc = np.empty((n, h * wp, co), dtype=x.dtype)
    _conv_taps(xf, np.ascontiguousarray(wk, dtype=x.dtype), acc, kh, kw, wp)
    return np.ascontiguousarray(acc.reshape(n, h, wp, co)[:, :, :w])


def conv_weight_grad_nhwc(x, g, int kh, int kw):
    """Weight gradient (kh*kw, C, Co) of ``conv_nhwc`` for output gradient ``g``."""
    n, h, w, c = x.shape
    co = g.shape[3]
    xf, wp = _pad_flat(x, kh, kw)
    gp = np.zeros((n, h, wp, co), dtype=x.dtype)
    gp[:, :, :w] = g
    out = np.empty((kh * kw, c, co), dtype=x.dtype)
    _weight_taps(xf, gp.reshape(n, h * wp, co), out, kh, kw, wp)
    return out


def _leaky_flat(const floating[::1] x, floating[::1] out, double slope):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef floating s = slope, v
    with nogil:
        for i in range(n):
            v = x[i]
            out[i] = v if v >= 0 else v * s


def _leaky_grad_flat(const floating[::1] x, const floating[::1] g, floating[::1] out, double slope):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef floating s = slope
    with nogil:
        for i in range(n):
            out[i] = g[i] if x[i] >= 0 else g[i] * s


def leaky_relu(x, double slope):
    out = np.empty_like(x)
    _leaky_flat(x.ravel(order="K"), out.ravel(order="K"), slope)
    return out


def leaky_relu_grad(x, g, double slope):
    """``g`` must share the memory layout of ``x``."""
    out = np.empty_like(x)
    _leaky_grad_flat(x.ravel(order="K"), g.ravel(order="K"), out.ravel(order="K"), slope)
    return out
