"""Compare the compiled and pure-Python kernel backends on representative inputs.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints the best-of-N wall time per kernel for each available backend and the
speedup of the compiled one. The full-network line times one training step
(forward + backward) at 128x128 with batch 8 under each backend.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from ritseg import kernels
from ritseg import tensor as T
from ritseg.losses import distance_targets, schedule, total_loss
from ritseg.model import build_model


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    x = rng.standard_normal((8, 64, 64, 96)).astype(np.float32)
    taps = rng.standard_normal((9, 96, 32)).astype(np.float32)
    g = rng.standard_normal((8, 64, 64, 32)).astype(np.float32)
    mask = np.ascontiguousarray((rng.random((400, 640)) < 0.01).view(np.uint8))
    mag = rng.random((400, 640))
    dirs = rng.integers(0, 4, size=mag.shape).astype(np.int8)
    act = rng.standard_normal((8, 32, 128, 128)).astype(np.float32)
    return {
        "conv 3x3 96->32 @64x64 b8": lambda k: k.conv_nhwc(x, taps, 3, 3),
        "conv weight grad": lambda k: k.conv_weight_grad_nhwc(x, g, 3, 3),
        "edt 400x640": lambda k: k.edt_squared(mask),
        "nms + hysteresis 400x640": lambda k: k.hysteresis(k.nms(mag, dirs), 0.3, 0.7),
        "leaky relu 8x32x128x128": lambda k: k.leaky_relu(act, 0.01),
    }


def train_step_case(rng):
    model = build_model(seed=0)
    x = T.Tensor(rng.random((8, 1, 128, 128)).astype(np.float32))
    labels = rng.integers(0, 4, size=(8, 128, 128))
    phi = distance_targets(labels)

    def step(_):
        with T.Tape() as tape:
            loss = total_loss(model.forward(x, "train"), labels, phi, schedule(0)).total
        tape.backward(loss)
        model.zero_grad()

    return step


def use_backend(mod):
    for name in kernels.KERNEL_NAMES:
        setattr(kernels, name, getattr(mod, name))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-network", action="store_true")
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    backends = kernels.available_backends()
    original = {name: getattr(kernels, name) for name in kernels.KERNEL_NAMES}
    work = cases(rng)
    if not args.skip_network:
        work["train step 128x128 b8"] = train_step_case(rng)

    names = list(backends)
    print(f"{'kernel':<30}" + "".join(f"{n:>12}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    try:
        for label, fn in work.items():
            row = []
            for mod in backends.values():
                use_backend(mod)
                fn(mod)  # warm caches and BLAS threads
                row.append(best_of(lambda: fn(mod), args.repeat))
            line = f"{label:<30}" + "".join(f"{t * 1e3:>10.2f}ms" for t in row)
            if len(row) > 1:
                times = dict(zip(names, row))
                line += f"{times['python'] / times['cython']:>11.2f}x"
            print(line)
    finally:
        for name, fn in original.items():
            setattr(kernels, name, fn)


if __name__ == "__main__":
    main()
