"""Time the hot kernels on both backends (numba JIT vs pure numpy).

    python3 benchmarks/bench_kernels.py [--size 64] [--channels 32] [--repeat 5]

The first numba call per kernel is a warm-up and excluded, so the numbers
are steady-state throughput. Outputs are compared for equality as a sanity
check before timing.
"""

import argparse
import time

import numpy as np

from eseg import tensor as T
from eseg.kernels import BACKENDS


def bench(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(x, c):
    rng = np.random.default_rng(0)
    w3 = (rng.standard_normal((c, c, 3, 3)) * 0.1).astype(x.dtype)
    wdw = (rng.standard_normal((c, 1, 5, 5)) * 0.1).astype(x.dtype)
    dy3 = T.conv2d(x, w3, 1, 1, backend="numpy")
    h, w = x.shape[2:]
    return {
        "conv2d 3x3": lambda b: T.conv2d(x, w3, 1, 1, backend=b),
        "conv2d 3x3 backward": lambda b: T.conv2d_backward(dy3, x, w3, 1, 1, backend=b),
        "depthwise 5x5 s2": lambda b: T.depthwise_conv2d(x, wdw, 2, 2, backend=b),
        "avg pool 3x3 s2": lambda b: T.pool2d(x, "avg", 3, 2, 1, backend=b),
        "max pool 3x3 s2": lambda b: T.pool2d(x, "max", 3, 2, 1, backend=b),
        "bilinear x2": lambda b: T.bilinear_resize(x, 2 * h, 2 * w, backend=b),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--channels", type=int, default=32)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    x = np.random.default_rng(1).standard_normal(
        (args.batch, args.channels, args.size, args.size)).astype(np.float32)
    print(f"input {x.shape} float32, best of {args.repeat}")
    print(f"{'kernel':<22}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, fn in cases(x, args.channels).items():
        times = {}
        outs = {}
        for b in sorted(BACKENDS):
            outs[b] = fn(b)
            times[b] = bench(lambda b=b: fn(b), args.repeat)
        a, b = (o[0] if isinstance(o, tuple) else o for o in (outs["numpy"], outs["numba"]))
        if not np.allclose(a, b, rtol=1e-4, atol=1e-5):
            raise SystemExit(f"{name}: backends disagree")
        print(f"{name:<22}{times['numpy'] * 1e3:>10.2f}{times['numba'] * 1e3:>10.2f}"
              f"{times['numpy'] / times['numba']:>8.1f}x")


if __name__ == "__main__":
    main()
