"""RITnet: five dense Down-Blocks, four Up-Blocks with skips, 1x1 classifier.

Each block keeps a constant 32-channel budget. Down-Block wiring::

    x1 = act(conv3x3(x))
    x2 = act(conv1x1(cat(x, x1)))
    x3 = act(conv3x3(x2))
    x4 = act(conv1x1(cat(x, x1, x3)))
    out = bn(act(conv3x3(x4)))

Up-Block wiring, with ``s`` the skip tensor from the matching Down-Block::

    u = cat(upsample(x), s)
    y1 = act(conv1x1(u))
    y2 = act(conv3x3(y1))
    y3 = act(conv1x1(cat(u, y2)))
    out = act(conv3x3(y3))

2x2 average pooling follows D1..D4, putting D5 at 1/16 of the input size.
"""
from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import BatchNormStats, ShapeError, Tensor

LEAKY_SLOPE = 0.01


class Conv:
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator):
        fan_in = cin * k * k
        bound = math.sqrt(6.0 / fan_in)
        self.weight = Tensor(
            rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(np.float32), requires_grad=True
        )
        b = 1.0 / math.sqrt(fan_in)
        self.bias = Tensor(rng.uniform(-b, b, size=cout).astype(np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias)

    def parameters(self, prefix: str):
        yield prefix + "weight", self.weight
        yield prefix + "bias", self.bias


class BatchNorm:
    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.stats = BatchNormStats(channels)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.stats, mode)

    def parameters(self, prefix: str):
        yield prefix + "gamma", self.gamma
        yield prefix + "beta", self.beta


class DownBlock:
    def __init__(self, cin: int, ch: int, rng: np.random.Generator, slope: float = LEAKY_SLOPE):
        self.conv1 = Conv(cin, ch, 3, rng)
        self.conv2 = Conv(cin + ch, ch, 1, rng)
        self.conv3 = Conv(ch, ch, 3, rng)
        self.conv4 = Conv(cin + 2 * ch, ch, 1, rng)
        self.conv5 = Conv(ch, ch, 3, rng)
        self.bn = BatchNorm(ch)
        self.slope = slope

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        act = lambda t: T.leaky_relu(t, self.slope)  # noqa: E731
        x1 = act(self.conv1(x))
        x2 = act(self.conv2(T.concat_channels([x, x1])))
        x3 = act(self.conv3(x2))
        x4 = act(self.conv4(T.concat_channels([x, x1, x3])))
        return self.bn(act(self.conv5(x4)), mode)

    def parameters(self, prefix: str):
        for name in ("conv1", "conv2", "conv3", "conv4", "conv5"):
            yield from getattr(self, name).parameters(f"{prefix}{name}.")
        yield from self.bn.parameters(prefix + "bn.")

    def batch_norms(self, prefix: str):
        yield prefix + "bn.", self.bn


class UpBlock:
    def __init__(self, ch: int, rng: np.random.Generator, slope: float = LEAKY_SLOPE):
        self.conv1 = Conv(2 * ch, ch, 1, rng)
        self.conv2 = Conv(ch, ch, 3, rng)
        self.conv3 = Conv(3 * ch, ch, 1, rng)
        self.conv4 = Conv(ch, ch, 3, rng)
        self.slope = slope

    def __call__(self, x: Tensor, skip: Tensor) -> Tensor:
        if (x.dims[2] * 2, x.dims[3] * 2) != skip.dims[2:]:
            raise ShapeError(f"up-block input {x.dims} does not pair with skip {skip.dims}")
        act = lambda t: T.leaky_relu(t, self.slope)  # noqa: E731
        u = T.concat_channels([T.upsample_nearest_2x(x), skip])
        y1 = act(self.conv1(u))
        y2 = act(self.conv2(y1))
        y3 = act(self.conv3(T.concat_channels([u, y2])))
        return act(self.conv4(y3))

    def parameters(self, prefix: str):
        for name in ("conv1", "conv2", "conv3", "conv4"):
            yield from getattr(self, name).parameters(f"{prefix}{name}.")

    def batch_norms(self, prefix: str):
        return iter(())


class RITnet:
    def __init__(self, num_classes: int = 4, channels: int = 32, in_channels: int = 1, seed: int = 0,
                 slope: float = LEAKY_SLOPE):
        rng = np.random.default_rng(seed)
        self.num_classes = num_classes
        self.channels = channels
        self.in_channels = in_channels
        self.down = [DownBlock(in_channels if i == 0 else channels, channels, rng, slope) for i in range(5)]
        self.up = [UpBlock(channels, rng, slope) for _ in range(4)]
        self.classifier = Conv(channels, num_classes, 1, rng)
        self.meta: dict = {"epoch": 0, "best_score": 0.0}
        self._params = OrderedDict(self._named_parameters())
        self._bns = OrderedDict(self._named_batch_norms())

    def _blocks(self):
        for i, b in enumerate(self.down, 1):
            yield f"down{i}.", b
        for i, b in enumerate(self.up, 1):
            yield f"up{i}.", b

    def _named_parameters(self):
        for prefix, block in self._blocks():
            yield from block.parameters(prefix)
        yield from self.classifier.parameters("classifier.")

    def _named_batch_norms(self):
        for prefix, block in self._blocks():
            yield from block.batch_norms(prefix)

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return self._params

    def batch_norms(self) -> "OrderedDict[str, BatchNorm]":
        return self._bns

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        """Every persistent array: parameters, then running statistics."""
        out = OrderedDict((k, p.data) for k, p in self._params.items())
        for prefix, bn in self._bns.items():
            out[prefix + "running_mean"] = bn.stats.mean
            out[prefix + "running_var"] = bn.stats.var
        return out

    def astype(self, dtype) -> "RITnet":
        for p in self._params.values():
            p.data = p.data.astype(dtype)
        for bn in self._bns.values():
            bn.stats.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def check_input(self, dims: tuple[int, ...]) -> None:
        if len(dims) != 4 or dims[1] != self.in_channels:
            raise ShapeError(f"expected N x {self.in_channels} x H x W input, got {dims}")
        if dims[2] % 16 or dims[3] % 16:
            raise ShapeError(f"input {dims[2]}x{dims[3]} must be divisible by 16 in both axes")

    def features(self, x: Tensor, mode: str = "train") -> list[Tensor]:
        """Down-Block outputs D1..D5 (before pooling)."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self._params["classifier.weight"].data.dtype))
        self.check_input(x.dims)
        outs = []
        h = x
        for i, block in enumerate(self.down):
            h = block(h, mode)
            outs.append(h)
            if i < 4:
                h = T.avg_pool_2x2(h)
        return outs

    def logits(self, x: Tensor, mode: str = "train") -> Tensor:
        d = self.features(x, mode)
        h = d[4]
        for block, skip in zip(self.up, (d[3], d[2], d[1], d[0])):
            h = block(h, skip)
        return self.classifier(h)

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        return T.softmax_channels(self.logits(x, mode))

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        """Infer-mode argmax label maps, N x H x W uint8."""
        probs = self.forward(x, mode="infer")
        return probs.data.argmax(axis=1).astype(np.uint8)


def build_model(num_classes: int = 4, channels: int = 32, seed: int = 0) -> RITnet:
    return RITnet(num_classes=num_classes, channels=channels, seed=seed)


def forward(model: RITnet, batch, mode: str = "train") -> Tensor:
    return model.forward(batch, mode)


def count_parameters(module) -> int:
    """Trainable scalars (weights, biases, BN affine); running stats excluded."""
    if isinstance(module, RITnet):
        named = module.parameters().items()
    else:
        named = module.parameters("")
    return int(sum(p.data.size for _, p in named))


def model_size_bytes(model: RITnet) -> int:
    return 4 * count_parameters(model)
