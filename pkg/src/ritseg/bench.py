"""Infer-mode throughput benchmark."""
from __future__ import annotations

import os
import platform
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as T
from .data import preprocess
from .model import RITnet


def _thread_count() -> int:
    try:
        from threadpoolctl import threadpool_info
    except ImportError:
        return int(os.environ.get("RITSEG_THREADS") or 1)
    counts = [info.get("num_threads", 1) for info in threadpool_info() if info.get("user_api") == "blas"]
    return max(counts) if counts else 1


def hardware_context() -> dict[str, str]:
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "cpus": str(os.cpu_count()),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "kernels": kernels.BACKEND,
    }


@dataclass
class BenchReport:
    height: int
    width: int
    batch: int
    warmup: int
    iters: int
    latencies: list[float]  # seconds per timed forward
    threads: int
    with_preprocess: bool = False
    hardware: dict[str, str] = field(default_factory=dict)

    @property
    def total_seconds(self) -> float:
        return float(np.sum(self.latencies))

    @property
    def mean_hz(self) -> float:
        """Forward passes per second over the whole timed run."""
        return self.iters / self.total_seconds

    @property
    def best_hz(self) -> float:
        return 1.0 / min(self.latencies)

    @property
    def worst_hz(self) -> float:
        return 1.0 / max(self.latencies)

    @property
    def images_per_second(self) -> float:
        return self.mean_hz * self.batch

    def to_text(self, per_iteration: bool = True) -> str:
        lat = np.asarray(self.latencies) * 1e3
        lines = [
            f"resolution    {self.width}x{self.height}, batch {self.batch}"
            + (", with pre-processing" if self.with_preprocess else ""),
            f"iterations    {self.iters} timed after {self.warmup} warmup",
            f"mean          {self.mean_hz:.3f} Hz ({self.images_per_second:.3f} images/s)",
            f"best          {self.best_hz:.3f} Hz",
            f"worst         {self.worst_hz:.3f} Hz",
            f"latency ms    mean {lat.mean():.2f}  median {np.median(lat):.2f}  min {lat.min():.2f}  max {lat.max():.2f}",
            f"threads       {self.threads}",
        ]
        lines += [f"{k:<13} {v}" for k, v in self.hardware.items()]
        if per_iteration:
            lines.append("per-iteration ms: " + " ".join(f"{v:.2f}" for v in lat))
        return "\n".join(lines)


def benchmark(model: RITnet, height: int = 400, width: int = 640, warmup: int = 20, iters: int = 200,
              batch: int = 1, with_preprocess: bool = False, seed: int = 0) -> BenchReport:
    """Time ``iters`` infer-mode forwards on a fixed random input.

    Input allocation happens before the clock starts. With ``with_preprocess``
    each timed iteration also runs gamma correction and CLAHE on every image.
    """
    if iters < 1 or warmup < 0 or batch < 1:
        raise ValueError("iters and batch must be positive and warmup non-negative")
    model.check_input((batch, model.in_channels, height, width))
    rng = np.random.default_rng(seed)
    raw = rng.random((batch, height, width))
    x = T.Tensor(raw[:, None].astype(np.float32))

    def step():
        if with_preprocess:
            inp = T.Tensor(np.stack([preprocess(im) for im in raw])[:, None].astype(np.float32))
        else:
            inp = x
        return model.forward(inp, mode="infer")

    for _ in range(warmup):
        step()
    latencies = []
    for _ in range(iters):
        t0 = time.perf_counter()
        step()
        latencies.append(time.perf_counter() - t0)
    return BenchReport(
        height=height,
        width=width,
        batch=batch,
        warmup=warmup,
        iters=iters,
        latencies=latencies,
        threads=_thread_count(),
        with_preprocess=with_preprocess,
        hardware=hardware_context(),
    )
