"""Pure-Python/NumPy versions of the compiled kernels in ``_ckernels.pyx``."""
from __future__ import annotations

import math

import numpy as np

_INF = math.inf


def _envelope_1d(f: list[float]) -> list[float]:
    n = len(f)
    v = [0] * n
    z = [0.0] * (n + 1)
    k = -1
    for p in range(n):
        fp = f[p]
        if fp == _INF:
            continue
        s = 0.0
        while k >= 0:
            q = v[k]
            s = ((fp + p * p) - (f[q] + q * q)) / (2.0 * (p - q))
            if s <= z[k]:
                k -= 1
            else:
                break
        if k < 0:
            k = 0
            v[0] = p
            z[0] = -_INF
        else:
            k += 1
            v[k] = p
            z[k] = s
        z[k + 1] = _INF
    if k < 0:
        return [_INF] * n
    out = [0.0] * n
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        out[q] = float((q - v[k]) ** 2) + f[v[k]]
    return out


def edt_squared(mask: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    out = np.empty((h, w), dtype=np.float64)
    for c in range(w):
        col = [0.0 if m else _INF for m in mask[:, c].tolist()]
        out[:, c] = _envelope_1d(col)
    for r in range(h):
        out[r, :] = _envelope_1d(out[r, :].tolist())
    return out


_OFFSETS = ((0, 1), (1, 1), (1, 0), (1, -1))


def nms(mag: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    h, w = mag.shape
    padded = np.zeros((h + 2, w + 2), dtype=np.float64)
    padded[1:-1, 1:-1] = mag
    keep = np.zeros((h, w), dtype=bool)
    for code, (dr, dc) in enumerate(_OFFSETS):
        sel = dirs == code
        before = padded[1 - dr : 1 - dr + h, 1 - dc : 1 - dc + w]
        after = padded[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
        keep |= sel & (mag > before) & (mag >= after)
    keep &= mag > 0.0
    return np.where(keep, mag, 0.0)


def hysteresis(mag: np.ndarray, low: float, high: float) -> np.ndarray:
    h, w = mag.shape
    weak = (mag >= low) & (mag > 0.0)
    out = np.zeros((h, w), dtype=np.uint8)
    stack = [(int(r), int(c)) for r, c in zip(*np.nonzero(mag >= high))]
    for r, c in stack:
        out[r, c] = 1
    while stack:
        r, c = stack.pop()
        for rr in range(max(r - 1, 0), min(r + 2, h)):
            for cc in range(max(c - 1, 0), min(c + 2, w)):
                if not out[rr, cc] and weak[rr, cc]:
                    out[rr, cc] = 1
                    stack.append((rr, cc))
    return out


def _pad_flat(x: np.ndarray, kh: int, kw: int) -> tuple[np.ndarray, int]:
    """Zero-pad an N,H,W,C block for a "same" kh x kw window and flatten rows.

    One extra bottom row keeps every tap's contiguous slice in bounds.
    """
    n, h, w, c = x.shape
    ph, pw = kh // 2, kw // 2
    wp = w + 2 * pw
    xp = np.zeros((n, h + 2 * ph + 1, wp, c), dtype=x.dtype)
    xp[:, ph : ph + h, pw : pw + w] = x
    return xp.reshape(n, -1, c), wp


def conv_nhwc(x: np.ndarray, wk: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Stride-1 "same" correlation of N,H,W,C input with taps ``wk`` (kh*kw, C, Co)."""
    n, h, w, _ = x.shape
    co = wk.shape[2]
    xf, wp = _pad_flat(x, kh, kw)
    m = h * wp
    acc = np.zeros((n, m, co), dtype=x.dtype)
    for ky in range(kh):
        for kx in range(kw):
            off = ky * wp + kx
            acc += np.matmul(xf[:, off : off + m], wk[ky * kw + kx])
    return np.ascontiguousarray(acc.reshape(n, h, wp, co)[:, :, :w])


def conv_weight_grad_nhwc(x: np.ndarray, g: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Weight gradient (kh*kw, C, Co) of ``conv_nhwc`` for output gradient ``g``."""
    n, h, w, c = x.shape
    co = g.shape[3]
    xf, wp = _pad_flat(x, kh, kw)
    m = h * wp
    gp = np.zeros((n, h, wp, co), dtype=g.dtype)
    gp[:, :, :w] = g
    gf = gp.reshape(n, m, co)
    out = np.empty((kh * kw, c, co), dtype=x.dtype)
    for ky in range(kh):
        for kx in range(kw):
            off = ky * wp + kx
            out[ky * kw + kx] = np.matmul(xf[:, off : off + m].transpose(0, 2, 1), gf).sum(axis=0)
    return out


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x >= 0, x, x * x.dtype.type(slope))


def leaky_relu_grad(x: np.ndarray, g: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x >= 0, g, g * g.dtype.type(slope))
