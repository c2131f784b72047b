"""Benchmark the compiled kernel backend against the numpy fallback.

Times the raw lowering kernels (im2col / col2im), a convolution
forward+backward, and a full training step of a 32-input model under each
backend, then prints a comparison table.

    python benchmarks/bench_backends.py [--repeats N]
"""

import argparse
import time

import numpy as np

from fpnkit import backend, ops
from fpnkit.model import build_named_model
from fpnkit.tensor import Tensor
from fpnkit.train import SgdNesterov


def time_call(fn, repeats: int) -> float:
    fn()  # warm-up
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_kernels(repeats: int):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(16, 32, 34, 34)).astype(np.float32)
    cols = backend.im2col(x, 3, 3, 1)

    yield "im2col 16x32x34x34 k3", lambda: backend.im2col(x, 3, 3, 1)
    yield "col2im (same shape)", lambda: backend.col2im(cols, 34, 34, 3, 3, 1)


def bench_conv(repeats: int):
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(16, 32, 32, 32)).astype(np.float32), requires_grad=True)
    w = Tensor(rng.normal(size=(64, 32, 3, 3)).astype(np.float32), requires_grad=True)

    def fwd_bwd():
        x.zero_grad()
        w.zero_grad()
        out = ops.conv2d(x, w, stride=1, pad=1)
        ops.sum_all(out).backward()

    yield "conv2d fwd+bwd 16x32x32x32", fwd_bwd


def bench_model_step(repeats: int):
    rng = np.random.default_rng(2)
    model = build_named_model("fpn-srr-ca", 20, num_classes=10, seed=0, dtype=np.float32)
    optimizer = SgdNesterov(model.named_parameters(), momentum=0.9, weight_decay=1e-4)
    x = rng.normal(size=(16, 3, 32, 32)).astype(np.float32)
    y = np.eye(10, dtype=np.float32)[rng.integers(0, 10, 16)]

    def step():
        logits = model(Tensor(x))
        loss = ops.softmax_cross_entropy(logits, y)
        model.zero_grad()
        loss.backward()
        optimizer.step(0.01)

    yield "fpn-srr-ca-20 train step (bs 16)", step


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    names = backend.available_backends()
    if len(names) < 2:
        print(f"only {names} available; build the extension to compare backends")

    cases = []
    for maker in (bench_kernels, bench_conv, bench_model_step):
        cases.extend(maker(args.repeats))

    width = max(len(label) for label, _ in cases)
    header = f"{'case'.ljust(width)}  " + "  ".join(f"{n:>10}" for n in names)
    if len(names) == 2:
        header += f"  {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for label, fn in cases:
        timings = []
        for name in names:
            backend.set_backend(name)
            timings.append(time_call(fn, args.repeats))
        row = f"{label.ljust(width)}  " + "  ".join(f"{t * 1e3:9.2f}ms" for t in timings)
        if len(timings) == 2:
            slow, fast = (timings[names.index("numpy")], timings[names.index("cython")])
            row += f"  {slow / fast:7.2f}x"
        print(row)


if __name__ == "__main__":
    main()
