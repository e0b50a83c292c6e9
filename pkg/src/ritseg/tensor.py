"""NCHW tensors with a recording tape for reverse-mode differentiation.

Only the primitives the segmentation network and its losses need are
provided. Every op works on float32 by default and preserves float64 when
given float64 inputs, which the finite-difference checks rely on.

Typical use::

    with Tape() as tape:
        probs = model(x, mode="train")
        loss = total_loss(probs, ...).total
    tape.backward(loss)
"""
from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels

DEFAULT_DTYPE = np.float32

_debug = os.environ.get("RITSEG_DEBUG", "") == "1"


class ShapeError(ValueError):
    """Operand dimensions are incompatible with the requested op."""


def set_debug(enabled: bool) -> None:
    """Toggle finite-value validation after every forward op."""
    global _debug
    _debug = bool(enabled)


_serial = itertools.count()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "uid")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None and not isinstance(data, (np.ndarray, np.generic)):
            dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > 4:
            raise ShapeError(f"tensors are limited to rank 4, got rank {arr.ndim}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.uid = next(_serial)  # never reused, unlike id()

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    shape = dims

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype.name}{flag})"


@dataclass
class Record:
    """One primitive application.

    Inputs produced earlier on the same tape are referenced by ``uid`` only,
    so an intermediate's memory is held solely by the backward closures that
    need it. Leaf inputs (parameters, data) are kept so their ``grad`` can be set.
    """

    op: str
    input_uids: tuple[int | None, ...]
    leaves: tuple[Tensor | None, ...]
    output_uid: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of primitive applications, replayed in reverse by ``backward``."""

    records: list[Record] = field(default_factory=list)
    produced: set[int] = field(default_factory=set)

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        return backward(self, loss)


_tapes: list[Tape] = []


def _active_tape() -> Tape | None:
    return _tapes[-1] if _tapes else None


def _emit(op: str, out_data: np.ndarray, inputs: Sequence[Tensor | None], grad_fn) -> Tensor:
    if _debug and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    tape = _active_tape()
    needs = tape is not None and any(t is not None and t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        uids = tuple(t.uid if t is not None and t.requires_grad else None for t in inputs)
        leaves = tuple(
            t if t is not None and t.requires_grad and t.uid not in tape.produced else None for t in inputs
        )
        tape.records.append(Record(op, uids, leaves, out.uid, grad_fn))
        tape.produced.add(out.uid)
    return out


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(x) through every record on ``tape``, consuming it.

    Leaf tensors (those not produced on the tape) that require gradients get
    their ``grad`` attribute set; leaves whose contribution is nil get zeros.
    Records are released as they are replayed so activation memory shrinks
    during the pass; a tape can therefore be replayed once. Returns the
    gradients left at the leaves, keyed by ``Tensor.uid``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got dims {loss.dims}")
    if not tape.records and loss.uid in tape.produced:
        raise RuntimeError("this tape has already been replayed")
    grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    records = tape.records
    while records:
        rec = records.pop()
        for t in rec.leaves:
            if t is not None:
                leaves[t.uid] = t
        gout = grads.pop(rec.output_uid, None)
        if gout is None:
            continue
        for key, g in zip(rec.input_uids, rec.backward(gout)):
            if key is None or g is None:
                continue
            grads[key] = grads[key] + g if key in grads else g
        del rec, gout
    for key, t in leaves.items():
        g = grads.get(key)
        t.grad = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.data.dtype).reshape(t.dims)
    if loss.requires_grad and loss.uid not in tape.produced:
        loss.grad = np.ones_like(loss.data)
    return {k: g for k, g in grads.items() if k in leaves}


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_rank4(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op} expects an N x C x H x W tensor, got dims {x.dims}")


# ---------------------------------------------------------------------------
# elementwise / reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.dims != b.dims:
        raise ShapeError(f"add: dims {a.dims} and {b.dims} differ")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def scale(x: Tensor, factor: float) -> Tensor:
    f = float(factor)
    return _emit("scale", x.data * x.data.dtype.type(f), (x,), lambda g: (g * g.dtype.type(f),))


def mul_const(x: Tensor, const: np.ndarray) -> Tensor:
    """Elementwise product with a non-differentiable array of identical dims."""
    c = np.asarray(const, dtype=x.data.dtype)
    if c.shape != x.dims:
        raise ShapeError(f"mul_const: dims {c.shape} and {x.dims} differ")
    return _emit("mul_const", x.data * c, (x,), lambda g: (g * c,))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape, dtype = x.dims, x.data.dtype
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=dtype)
    return _emit("sum", out, (x,), lambda g: (np.broadcast_to(g, shape).astype(dtype),))


def mean(x: Tensor) -> Tensor:
    shape, dtype, n = x.dims, x.data.dtype, x.data.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=dtype)
    return _emit("mean", out, (x,), lambda g: (np.full(shape, g / n, dtype=dtype),))


def _same_layout(g: np.ndarray, like: np.ndarray) -> np.ndarray:
    if g.strides == like.strides:
        return g
    out = np.empty_like(like, dtype=g.dtype)
    out[...] = g
    return out


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if slope < 0:
        raise ValueError("leaky_relu slope must be non-negative")
    out = kernels.leaky_relu(x.data, slope)
    # with a positive slope the output has the sign of the input, so keeping it
    # lets the pre-activation be freed
    ref = out if slope > 0 else x.data

    def grad_fn(g):
        return (kernels.leaky_relu_grad(ref, _same_layout(g, ref), slope),)

    return _emit("leaky_relu", out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# convolution and resampling


def _nhwc(a: np.ndarray) -> np.ndarray:
    """Channels-last view of an N,C,H,W array, copying only when the memory is not already laid out that way."""
    t = a.transpose(0, 2, 3, 1)
    return t if t.flags.c_contiguous else np.ascontiguousarray(t)


def _nchw(t: np.ndarray) -> np.ndarray:
    return t.transpose(0, 3, 1, 2)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 convolution with "same" zero padding (odd kernels only).

    Results are channels-last in memory (dims stay N,C,H,W), which keeps
    every matrix product in the shape BLAS handles best.
    """
    _check_rank4(x, "conv2d")
    n, cin, h, w = x.dims
    cout, wcin, kh, kw = weight.dims
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} must have odd extents")
    if bias is not None and bias.dims != (cout,):
        raise ShapeError(f"conv2d: bias dims {bias.dims} do not match {cout} outputs")
    dt = x.data.dtype
    xl = _nhwc(x.data)
    wd = weight.data.astype(dt, copy=False)
    pointwise = kh == 1 and kw == 1
    if pointwise:
        wmat = wd.reshape(cout, cin)
        out = (xl.reshape(-1, cin) @ wmat.T).reshape(n, h, w, cout)
    else:
        taps = np.ascontiguousarray(wd.transpose(2, 3, 1, 0).reshape(kh * kw, cin, cout))
        out = kernels.conv_nhwc(xl, taps, kh, kw)
    if bias is not None:
        out += bias.data.astype(dt, copy=False)

    def grad_fn(g):
        gl = _nhwc(g)
        gw = gb = gx = None
        if bias is not None and bias.requires_grad:
            gb = gl.sum(axis=(0, 1, 2))
        if pointwise:
            g2 = gl.reshape(-1, cout)
            if weight.requires_grad:
                gw = (g2.T @ xl.reshape(-1, cin)).reshape(weight.dims)
            if x.requires_grad:
                gx = _nchw((g2 @ wmat).reshape(n, h, w, cin))
            return gx, gw, gb
        if weight.requires_grad:
            gt = kernels.conv_weight_grad_nhwc(xl, gl, kh, kw)
            gw = gt.reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1)
        if x.requires_grad:
            flipped = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(kh * kw, cout, cin))
            gx = _nchw(kernels.conv_nhwc(gl, flipped, kh, kw))
        return gx, gw, gb

    return _emit("conv2d", _nchw(out), (x, weight, bias), grad_fn)


def avg_pool_2x2(x: Tensor) -> Tensor:
    _check_rank4(x, "avg_pool_2x2")
    n, c, h, w = x.dims
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool_2x2 needs even H and W, got {h}x{w}")
    q = _nhwc(x.data).reshape(n, h // 2, 2, w // 2, 2, c)
    quarter = x.data.dtype.type(0.25)
    out = (q[:, :, 0, :, 0] + q[:, :, 0, :, 1] + q[:, :, 1, :, 0] + q[:, :, 1, :, 1]) * quarter

    def grad_fn(g):
        gl = _nhwc(g) * g.dtype.type(0.25)
        return (_nchw(np.repeat(np.repeat(gl, 2, axis=1), 2, axis=2)),)

    return _emit("avg_pool_2x2", _nchw(out), (x,), grad_fn)


def upsample_nearest_2x(x: Tensor) -> Tensor:
    _check_rank4(x, "upsample_nearest_2x")
    n, c, h, w = x.dims
    out = np.repeat(np.repeat(_nhwc(x.data), 2, axis=1), 2, axis=2)

    def grad_fn(g):
        return (_nchw(_nhwc(g).reshape(n, h, 2, w, 2, c).sum(axis=(2, 4))),)

    return _emit("upsample_nearest_2x", _nchw(out), (x,), grad_fn)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    for p in parts:
        _check_rank4(p, "concat_channels")
    n, _, h, w = parts[0].dims
    for p in parts[1:]:
        if (p.dims[0], p.dims[2], p.dims[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: dims {p.dims} disagree with {parts[0].dims}")
    if len(parts) == 1:
        return _emit("concat_channels", parts[0].data.copy(), (parts[0],), lambda g: (g,))
    offsets = np.cumsum([0] + [p.dims[1] for p in parts])
    out = _nchw(np.concatenate([_nhwc(p.data) for p in parts], axis=3))

    def grad_fn(g):
        return tuple(g[:, offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    return _emit("concat_channels", out, tuple(parts), grad_fn)


def softmax_channels(x: Tensor) -> Tensor:
    _check_rank4(x, "softmax_channels")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _emit("softmax_channels", out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# batch normalization

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class BatchNormStats:
    """Per-channel running mean/variance owned by one batch-norm layer."""

    def __init__(self, channels: int, dtype=DEFAULT_DTYPE):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.ready = False

    def astype(self, dtype) -> None:
        self.mean = self.mean.astype(dtype)
        self.var = self.var.astype(dtype)


class BatchNormStateError(RuntimeError):
    pass


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: BatchNormStats,
    mode: str = "train",
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel normalization over (N, H, W).

    Train mode uses batch statistics and folds them into ``stats`` with the
    given momentum (variance unbiased, as is conventional for running
    estimates). Infer mode uses ``stats`` and refuses to run until they have
    been populated by a train step or a checkpoint load.
    """
    _check_rank4(x, "batch_norm")
    n, c, h, w = x.dims
    if gamma.dims != (c,) or beta.dims != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have dims ({c},)")
    dt = x.data.dtype
    if mode == "train":
        mu = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        var = x.data.var(axis=(0, 2, 3), dtype=np.float64)
        m = n * h * w
        unbiased = var * (m / (m - 1)) if m > 1 else var
        stats.mean = ((1 - momentum) * stats.mean + momentum * mu).astype(stats.mean.dtype)
        stats.var = ((1 - momentum) * stats.var + momentum * unbiased).astype(stats.var.dtype)
        stats.ready = True
    elif mode == "infer":
        if not stats.ready:
            raise BatchNormStateError("batch_norm in infer mode before running statistics exist")
        mu, var = stats.mean.astype(np.float64), stats.var.astype(np.float64)
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    inv = (1.0 / np.sqrt(var + eps)).astype(dt)
    shift = mu.astype(dt)[None, :, None, None]
    xd = x.data
    out = (xd - shift) * inv[None, :, None, None] * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def grad_fn(g):
        xhat = (xd - shift) * inv[None, :, None, None]  # recomputed rather than stored
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if mode == "train":
                m = n * h * w
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv[None, :, None, None]
        return gx, gg, gb

    return _emit("batch_norm", out, (x, gamma, beta), grad_fn)
