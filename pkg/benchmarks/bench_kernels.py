"""Time the numba kernels against the numpy reference on training-sized tensors.

    python benchmarks/bench_kernels.py [--repeats 20]

Shapes follow one per-example gradient of the default model: a 1x80x180 crop
through a 16-channel and a 32-channel block.
"""
import argparse
import time

import numpy as np

from dpspeech._kernels import numba_impl, numpy_impl


def best_of(fn, args, repeats):
    fn(*args)  # warm-up, and JIT compilation for numba
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    x1 = rng.standard_normal((1, 1, 80, 180))
    w1 = rng.standard_normal((16, 1, 3, 3))
    x2 = rng.standard_normal((1, 16, 40, 90))
    w2 = rng.standard_normal((32, 16, 3, 3))
    dy2 = rng.standard_normal((1, 32, 40, 90))
    gamma, beta = np.ones(32), np.zeros(32)
    xhat, inv = numpy_impl.group_norm_forward(dy2, 8, gamma, beta, 1e-5)[1:]
    return [
        ("conv fwd 1->16 @80x180", "conv2d_forward", (x1, w1)),
        ("conv fwd 16->32 @40x90", "conv2d_forward", (x2, w2)),
        ("conv dx 32->16 @40x90", "conv2d_backward_input", (dy2, w2)),
        ("conv dw 16->32 @40x90", "conv2d_backward_weight", (x2, dy2, 3, 3)),
        ("group norm fwd 32ch", "group_norm_forward", (dy2, 8, gamma, beta, 1e-5)),
        ("group norm bwd 32ch", "group_norm_backward", (dy2, xhat, inv, 8, gamma)),
        ("avg pool fwd 32ch", "avg_pool2_forward", (dy2,)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()

    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for label, name, inputs in cases(np.random.default_rng(0)):
        t_np = best_of(getattr(numpy_impl, name), inputs, args.repeats)
        t_nb = best_of(getattr(numba_impl, name), inputs, args.repeats)
        print(f"{label:28s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
