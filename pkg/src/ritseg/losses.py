"""Boundary-weighted cross-entropy, generalized Dice and surface losses, plus their schedule.

The combined objective is::

    total = mean_i[CE_i * (l1 + l2 * B_i)] + l3 * GDL + l4 * SL

where ``B`` is the dilated Canny boundary of the ground truth and the
weights follow ``schedule(epoch)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .imageproc import NUM_CLASSES, dilate, label_edges, signed_distance_maps
from .tensor import ShapeError, Tensor

PROB_FLOOR = 1e-7
GDL_EPS = 1e-5


@dataclass(frozen=True)
class LossWeights:
    l1: float = 1.0
    l2: float = 20.0
    l3: float = 1.0
    l4: float = 0.0

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.l1, self.l2, self.l3, self.l4)


@dataclass(frozen=True)
class ScheduleConfig:
    ramp_epochs: int = 125
    clamp: bool = True  # False: the literal "otherwise 0" reading

    def __post_init__(self):
        if self.ramp_epochs <= 0:
            raise ValueError("ramp length must be positive")


def schedule(epoch: int, config: ScheduleConfig = ScheduleConfig()) -> LossWeights:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if epoch < config.ramp_epochs:
        alpha = epoch / config.ramp_epochs
    else:
        alpha = 1.0 if config.clamp else 0.0
    return LossWeights(1.0, 20.0, 1.0 - alpha, alpha)


@dataclass
class LossBundle:
    weighted_ce: Tensor
    gdl: Tensor
    sl: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("weighted_ce", "gdl", "sl", "total")}


# ---------------------------------------------------------------------------
# targets


def boundary_mask(labels: np.ndarray, radius: int = 2) -> np.ndarray:
    return dilate(label_edges(labels), radius)


def boundary_weight_map(labels: np.ndarray, l1: float = 1.0, l2: float = 20.0) -> np.ndarray:
    """Per-pixel CE weights ``l1 + l2 * [pixel on dilated boundary]`` for H x W or N x H x W labels."""
    labels = np.asarray(labels)
    if labels.ndim == 2:
        return l1 + l2 * boundary_mask(labels).astype(np.float64)
    return np.stack([boundary_weight_map(lab, l1, l2) for lab in labels])


def distance_targets(labels: np.ndarray, normalize: bool = False) -> np.ndarray:
    """Signed distance maps for one label map (C x H x W) or a batch (N x C x H x W)."""
    labels = np.asarray(labels)
    if labels.ndim == 3:
        return np.stack([distance_targets(lab, normalize) for lab in labels])
    phi = signed_distance_maps(labels, NUM_CLASSES)
    if normalize:
        h, w = labels.shape
        phi = phi / float(np.hypot(h, w))
    return phi


def _check_labels(probs: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    n, c, h, w = probs.dims
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels {labels.shape} do not match probabilities {probs.dims}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label ids must lie in 0..{c - 1}")
    return labels.astype(np.int64)


def _one_hot(labels: np.ndarray, c: int, dtype) -> np.ndarray:
    return (labels[:, None, :, :] == np.arange(c)[None, :, None, None]).astype(dtype)


# ---------------------------------------------------------------------------
# differentiable terms


def per_pixel_cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """-log p[true class] per pixel, probabilities floored at 1e-7; N x H x W."""
    lab = _check_labels(probs, labels)
    p = probs.data
    picked = np.take_along_axis(p, lab[:, None], axis=1)[:, 0]
    safe = np.clip(picked, PROB_FLOOR, 1.0)
    out = -np.log(safe)

    def grad_fn(g):
        gp = np.zeros_like(p)
        live = picked > PROB_FLOOR
        local = np.where(live, -g / safe, 0.0).astype(p.dtype)
        np.put_along_axis(gp, lab[:, None], local[:, None], axis=1)
        return (gp,)

    return T._emit("cross_entropy", out.astype(p.dtype), (probs,), grad_fn)


def weighted_mean(x: Tensor, weights: np.ndarray) -> Tensor:
    return T.mean(T.mul_const(x, weights))


def _gdl_class_weights(onehot: np.ndarray, absent: str) -> np.ndarray:
    counts = onehot.sum(axis=(2, 3), dtype=np.float64)  # N x C
    w = 1.0 / (counts**2 + GDL_EPS)
    if absent == "exclude":
        w = np.where(counts > 0, w, 0.0)
    elif absent != "epsilon":
        raise ValueError(f"unknown absent-class policy {absent!r}")
    return w


def generalized_dice_loss(probs: Tensor, labels: np.ndarray, absent: str = "exclude") -> Tensor:
    """1 - 2 sum_c w_c sum_i p g / sum_c w_c sum_i (p + g), per image then averaged.

    ``w_c = 1 / (n_c^2 + 1e-5)`` with ``n_c`` the ground-truth pixel count.
    Classes absent from an image get weight 0 by default; ``absent="epsilon"``
    keeps the bare ``1 / 1e-5`` weight instead.
    """
    lab = _check_labels(probs, labels)
    n, c = probs.dims[:2]
    p = probs.data.astype(np.float64)
    g = _one_hot(lab, c, np.float64)
    w = _gdl_class_weights(g, absent)
    inter = (p * g).sum(axis=(2, 3))
    union = (p + g).sum(axis=(2, 3))
    num = (w * inter).sum(axis=1)
    den = (w * union).sum(axis=1)
    out = np.mean(1.0 - 2.0 * num / den)

    def grad_fn(gout):
        coef = (-2.0 * float(gout) / n) / den**2  # N
        grad = coef[:, None, None, None] * w[:, :, None, None] * (
            g * den[:, None, None, None] - num[:, None, None, None]
        )
        return (grad.astype(probs.data.dtype),)

    return T._emit("generalized_dice", np.asarray(out, dtype=probs.data.dtype), (probs,), grad_fn)


def surface_loss(probs: Tensor, phi: np.ndarray) -> Tensor:
    """Mean over batch, classes and pixels of phi * p."""
    phi = np.asarray(phi)
    if phi.shape != probs.dims:
        raise ShapeError(f"distance maps {phi.shape} do not match probabilities {probs.dims}")
    size = probs.data.size
    out = (phi * probs.data.astype(np.float64)).sum() / size
    scaled = (phi / size).astype(probs.data.dtype)
    return T._emit(
        "surface", np.asarray(out, dtype=probs.data.dtype), (probs,), lambda g: (scaled * g,)
    )


def total_loss(
    probs: Tensor,
    labels: np.ndarray,
    phi: np.ndarray,
    weights: LossWeights,
    boundary: np.ndarray | None = None,
    absent: str = "exclude",
) -> LossBundle:
    """Combined objective. ``boundary`` is the N x H x W 0/1 mask; computed from labels if omitted."""
    lab = _check_labels(probs, labels)
    if boundary is None:
        boundary = np.stack([boundary_mask(x) for x in lab])
    boundary = np.asarray(boundary, dtype=np.float64)
    if boundary.shape != lab.shape:
        raise ShapeError(f"boundary mask {boundary.shape} does not match labels {lab.shape}")
    pixel_w = weights.l1 + weights.l2 * boundary
    wce = weighted_mean(per_pixel_cross_entropy(probs, lab), pixel_w)
    gdl = generalized_dice_loss(probs, lab, absent)
    sl = surface_loss(probs, phi)
    total = T.add(T.add(wce, T.scale(gdl, weights.l3)), T.scale(sl, weights.l4))
    return LossBundle(wce, gdl, sl, total)
