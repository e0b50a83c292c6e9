"""Binary checkpoint format (little-endian throughout).

Layout::

    b"RITN"  u32 version=1  u32 tensor_count
    per tensor: u32 name_len, utf-8 name, u32 rank, rank x u32 dims, f32 payload
    trailer:    u32 epoch, f32 best_score
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import RITnet, build_model

MAGIC = b"RITN"
VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class UnknownTensorError(CheckpointError):
    pass


class MissingTensorError(CheckpointError):
    def __init__(self, name: str):
        super().__init__(f"checkpoint is missing tensor {name!r}")
        self.name = name


class TensorShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    epoch: int = 0
    best_score: float = 0.0

    @classmethod
    def from_model(cls, model: RITnet, epoch: int | None = None, best_score: float | None = None) -> "Checkpoint":
        arrays = OrderedDict((k, np.array(v, dtype="<f4")) for k, v in model.state_arrays().items())
        return cls(
            arrays,
            int(model.meta.get("epoch", 0) if epoch is None else epoch),
            float(model.meta.get("best_score", 0.0) if best_score is None else best_score),
        )

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<II", VERSION, len(self.tensors))]
        for name, arr in self.tensors.items():
            raw = name.encode("utf-8")
            a = np.ascontiguousarray(arr, dtype="<f4")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<I", a.ndim))
            parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
            parts.append(a.tobytes())
        parts.append(struct.pack("<If", self.epoch, self.best_score))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        reader = _Reader(buf)
        if reader.take(4) != MAGIC:
            raise CheckpointFormatError("not a checkpoint file (bad magic bytes)")
        version, count = reader.unpack("<II")
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (nlen,) = reader.unpack("<I")
            try:
                name = reader.take(nlen).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise CheckpointFormatError("tensor name is not valid UTF-8") from exc
            if name in tensors:
                raise CheckpointFormatError(f"duplicate tensor name {name!r}")
            (rank,) = reader.unpack("<I")
            if rank > 4:
                raise CheckpointFormatError(f"tensor {name!r} has rank {rank} > 4")
            dims = reader.unpack(f"<{rank}I") if rank else ()
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = reader.take(4 * size)
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        epoch, best = reader.unpack("<If")
        if not reader.done():
            raise CheckpointFormatError("trailing bytes after checkpoint metadata")
        return cls(tensors, int(epoch), float(best))

    def apply_to(self, model: RITnet) -> RITnet:
        expected = model.state_arrays()
        for name in self.tensors:
            if name not in expected:
                raise UnknownTensorError(f"checkpoint tensor {name!r} does not belong to the model")
        for name, arr in expected.items():
            if name not in self.tensors:
                raise MissingTensorError(name)
            if self.tensors[name].shape != arr.shape:
                raise TensorShapeError(
                    f"tensor {name!r} has dims {self.tensors[name].shape}, model expects {arr.shape}"
                )
        params = model.parameters()
        for name, p in params.items():
            p.data = self.tensors[name].copy()
        for prefix, bn in model.batch_norms().items():
            bn.stats.mean = self.tensors[prefix + "running_mean"].copy()
            bn.stats.var = self.tensors[prefix + "running_var"].copy()
            bn.stats.ready = True
        model.meta = {"epoch": self.epoch, "best_score": self.best_score}
        return model

    def to_model(self) -> RITnet:
        w = self.tensors.get("classifier.weight")
        num_classes, channels = (w.shape[0], w.shape[1]) if w is not None and w.ndim == 4 else (4, 32)
        return self.apply_to(build_model(num_classes, channels))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(self.buf)} (needed {self.pos + n})")
        out = bytes(self.buf[self.pos : self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self) -> bool:
        return self.pos == len(self.buf)


def save_checkpoint(model: RITnet, path: str | Path, epoch: int | None = None,
                    best_score: float | None = None) -> Checkpoint:
    ckpt = Checkpoint.from_model(model, epoch, best_score)
    Path(path).write_bytes(ckpt.to_bytes())
    return ckpt


def read_checkpoint(path: str | Path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return Checkpoint.from_bytes(buf)


def load_checkpoint(path: str | Path) -> RITnet:
    return read_checkpoint(path).to_model()
