"""Grayscale image kernels: gamma, CLAHE, Gaussian blur, Canny, dilation, distance maps.

Images are 2-D float arrays with intensities in [0, 1]; label maps are 2-D
integer arrays with class ids 0..3.
"""
from __future__ import annotations

import math

import numpy as np

from . import kernels

NUM_CLASSES = 4
LABEL_LEVELS = np.array([0, 85, 170, 255], dtype=np.float64) / 255.0


class ImageError(ValueError):
    pass


def gamma_correct(img: np.ndarray, exponent: float = 0.8) -> np.ndarray:
    if exponent <= 0:
        raise ImageError("gamma exponent must be positive")
    return np.power(np.clip(img, 0.0, 1.0), exponent)


# ---------------------------------------------------------------------------
# CLAHE


def _tile_edges(n: int, tiles: int) -> np.ndarray:
    return np.array([(i * n) // tiles for i in range(tiles + 1)])


def _clahe_lut(hist: np.ndarray, area: int, clip: float | None) -> np.ndarray:
    hist = hist.astype(np.int64)
    if clip is not None:
        limit = max(int(clip * area / 256), 1)
        excess = int(np.maximum(hist - limit, 0).sum())
        hist = np.minimum(hist, limit)
        batch, residual = divmod(excess, 256)
        hist += batch
        hist[-1] += residual
    return np.cumsum(hist) / float(area)


def _interp_axis(n: int, edges: np.ndarray):
    # For each coordinate: lower tile, upper tile, weight of the upper tile.
    centers = (edges[:-1] + edges[1:] - 1) / 2.0
    pos = np.arange(n, dtype=np.float64)
    hi = np.searchsorted(centers, pos, side="right")
    lo = np.clip(hi - 1, 0, len(centers) - 1)
    hi = np.clip(hi, 0, len(centers) - 1)
    span = centers[hi] - centers[lo]
    weight = np.where(span > 0, (pos - centers[lo]) / np.where(span > 0, span, 1.0), 0.0)
    return lo, hi, weight


def clahe(img: np.ndarray, grid: tuple[int, int] = (8, 8), clip: float | None = 1.5) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    Intensities are quantized to 256 levels. Each tile's histogram is clipped
    at ``clip * tile_area / 256`` counts (at least one); the excess is spread
    evenly over all bins with the remainder going to the top bin. Output
    pixels blend the four neighbouring tile mappings bilinearly, with
    coordinates clamped outside the lattice of tile centres. ``clip=None``
    disables clipping.
    """
    h, w = img.shape
    gy, gx = grid
    if h < gy or w < gx:
        raise ImageError(f"image {h}x{w} is smaller than one tile of a {gy}x{gx} grid")
    q = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.int64)
    ey, ex = _tile_edges(h, gy), _tile_edges(w, gx)
    luts = np.empty((gy, gx, 256), dtype=np.float64)
    for i in range(gy):
        for j in range(gx):
            tile = q[ey[i] : ey[i + 1], ex[j] : ex[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=256)
            luts[i, j] = _clahe_lut(hist, tile.size, clip)
    ylo, yhi, wy = _interp_axis(h, ey)
    xlo, xhi, wx = _interp_axis(w, ex)
    Y0, X0 = ylo[:, None], xlo[None, :]
    Y1, X1 = yhi[:, None], xhi[None, :]
    WY, WX = wy[:, None], wx[None, :]
    top = (1 - WX) * luts[Y0, X0, q] + WX * luts[Y0, X1, q]
    bottom = (1 - WX) * luts[Y1, X0, q] + WX * luts[Y1, X1, q]
    return np.clip((1 - WY) * top + WY * bottom, 0.0, 1.0)


# ---------------------------------------------------------------------------
# filtering


def gaussian_kernel_1d(sigma: float, ksize: int) -> np.ndarray:
    if sigma <= 0:
        raise ImageError("sigma must be positive")
    if ksize % 2 == 0 or ksize < 1:
        raise ImageError("kernel size must be a positive odd number")
    r = ksize // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_kernel_2d(sigma: float, ksize: int = 7) -> np.ndarray:
    k = gaussian_kernel_1d(sigma, ksize)
    return np.outer(k, k)


def _separable(img: np.ndarray, ky: np.ndarray, kx: np.ndarray) -> np.ndarray:
    ry, rx = len(ky) // 2, len(kx) // 2
    p = np.pad(np.asarray(img, dtype=np.float64), ((ry, ry), (rx, rx)), mode="edge")
    h, w = img.shape
    tmp = np.zeros((h + 2 * ry, w), dtype=np.float64)
    for i, v in enumerate(kx):
        tmp += v * p[:, i : i + w]
    out = np.zeros((h, w), dtype=np.float64)
    for i, v in enumerate(ky):
        out += v * tmp[i : i + h, :]
    return out


def gaussian_blur(img: np.ndarray, sigma: float, ksize: int = 7) -> np.ndarray:
    """Normalized sampled Gaussian, clamp-to-edge borders."""
    k = gaussian_kernel_1d(sigma, ksize)
    return _separable(img, k, k)


def sobel(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal and vertical Sobel responses (gy grows downwards)."""
    smooth = np.array([1.0, 2.0, 1.0])
    deriv = np.array([-1.0, 0.0, 1.0])
    gx = _separable(img, smooth, deriv)
    gy = _separable(img, deriv, smooth)
    return gx, gy


def _direction_bins(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    angle = np.degrees(np.arctan2(gy, gx)) % 180.0
    bins = np.floor((angle + 22.5) / 45.0).astype(np.int64) % 4
    return bins.astype(np.int8)


def canny_edges(
    img: np.ndarray,
    low: float,
    high: float,
    sigma: float = 1.0,
    relative: bool = False,
) -> np.ndarray:
    """Canny edge map as a boolean mask.

    Gaussian smoothing, Sobel gradients, non-maximum suppression over four
    direction bins, then double thresholding with 8-connected hysteresis.
    With ``relative=True`` the thresholds are fractions of the maximum
    gradient magnitude.
    """
    if low >= high:
        raise ImageError(f"canny thresholds need low < high, got {low} >= {high}")
    ksize = 2 * int(math.ceil(3 * sigma)) + 1
    smoothed = gaussian_blur(img, sigma, ksize)
    gx, gy = sobel(smoothed)
    mag = np.hypot(gx, gy)
    gmax = float(mag.max())
    if gmax <= 1e-12:
        return np.zeros(img.shape, dtype=bool)
    if relative:
        low, high = low * gmax, high * gmax
    thin = kernels.nms(np.ascontiguousarray(mag), np.ascontiguousarray(_direction_bins(gx, gy)))
    return kernels.hysteresis(thin, float(low), float(high)).astype(bool)


def render_labels(labels: np.ndarray) -> np.ndarray:
    """Label ids 0..3 mapped to intensities 0, 85, 170, 255 (over 255)."""
    return LABEL_LEVELS[np.asarray(labels, dtype=np.int64)]


def label_edges(labels: np.ndarray) -> np.ndarray:
    """Canny on the rendered label map with sigma 1 and thresholds 0.1/0.2 of the max gradient."""
    return canny_edges(render_labels(labels), 0.1, 0.2, sigma=1.0, relative=True)


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """``radius`` iterations of a 3x3 square dilation."""
    if radius < 0:
        raise ImageError("dilation radius must be non-negative")
    out = np.asarray(mask, dtype=bool).copy()
    h, w = out.shape
    for _ in range(radius):
        p = np.pad(out, 1)
        grown = np.zeros_like(out)
        for dr in range(3):
            for dc in range(3):
                grown |= p[dr : dr + h, dc : dc + w]
        out = grown
    return out


# ---------------------------------------------------------------------------
# distances


def distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from every pixel to the nearest true pixel."""
    m = np.ascontiguousarray(np.asarray(mask, dtype=bool).view(np.uint8))
    if not m.any():
        raise ImageError("distance_transform needs at least one true pixel")
    return np.sqrt(kernels.edt_squared(m))


def region_boundary(region: np.ndarray) -> np.ndarray:
    """Pixels of ``region`` with a 4-neighbour outside it, plus its image-border pixels."""
    r = np.asarray(region, dtype=bool)
    p = np.pad(r, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return r & ~interior


def signed_distance_maps(labels: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Per-class signed distance to the class boundary: negative inside, positive outside.

    A class absent from the map gets the constant ``height + width``.
    Returns an array of shape (num_classes, H, W).
    """
    labels = np.asarray(labels)
    h, w = labels.shape
    out = np.empty((num_classes, h, w), dtype=np.float64)
    for c in range(num_classes):
        region = labels == c
        if not region.any():
            out[c] = float(h + w)
            continue
        dist = distance_transform(region_boundary(region))
        out[c] = np.where(region, -dist, dist) + 0.0  # no negative zeros on the boundary
    return out
