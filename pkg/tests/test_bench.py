import pytest

import numpy as np

from ritseg.bench import BenchReport, benchmark, hardware_context
from ritseg.model import build_model as _fresh
from ritseg.tensor import ShapeError, Tensor


def build_model():
    # one train-mode pass fills the running statistics infer mode needs
    model = _fresh()
    model.forward(Tensor(np.zeros((2, 1, 16, 16), np.float32)), "train")
    return model


@pytest.fixture(scope="module")
def report():
    return benchmark(build_model(), height=32, width=48, warmup=1, iters=5)


def test_hz_identity(report):
    assert report.mean_hz == pytest.approx(report.iters / sum(report.latencies), rel=1e-12)
    assert report.best_hz >= report.mean_hz >= report.worst_hz
    assert report.images_per_second == pytest.approx(report.mean_hz)


def test_latencies_positive(report):
    assert len(report.latencies) == 5 and all(t > 0 for t in report.latencies)


def test_text_report(report):
    text = report.to_text()
    assert "48x32" in text and "kernels" in text and text.count("\n") >= 7
    assert "per-iteration" not in report.to_text(per_iteration=False)


def test_batch_and_preprocess():
    r = benchmark(build_model(), height=32, width=32, warmup=0, iters=2, batch=3, with_preprocess=True)
    assert r.images_per_second == pytest.approx(3 * r.mean_hz) and r.with_preprocess


def test_errors():
    with pytest.raises(ShapeError):
        benchmark(build_model(), height=30, width=32, iters=1, warmup=0)
    with pytest.raises(ValueError):
        benchmark(build_model(), height=32, width=32, iters=0)


def test_hardware_context_fields():
    ctx = hardware_context()
    assert {"machine", "cpus", "numpy", "kernels"} <= ctx.keys()
    assert isinstance(BenchReport(1, 1, 1, 0, 1, [0.5], 1).mean_hz, float)
