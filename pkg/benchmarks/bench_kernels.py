"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one row per kernel: best-of-N wall time for each backend, the
speedup, and the max abs difference between the two outputs.
"""
import argparse
import timeit

import numpy as np

from surge.kernels import KERNEL_NAMES, available_backends, get_backend


def workloads(rng):
    a = np.where(rng.standard_normal((256, 512)) >= 0, 1.0, -1.0)
    b = np.where(rng.standard_normal((128, 512)) >= 0, 1.0, -1.0)
    x = rng.standard_normal((8, 16, 16, 16))
    w = rng.standard_normal((16, 16, 3, 3))
    g = rng.standard_normal((8, 16, 16, 16))
    gb, ga = rng.standard_normal((2, 20_000, 64))
    gs = rng.standard_normal(64)
    return {
        "sign_matmul": (a, b),
        "conv2d_same": (x, w),
        "conv2d_same_grad_input": (g, w),
        "conv2d_same_grad_weight": (x, g, 3),
        "pair_moments": (gb, ga, gs),
    }


def max_diff(u, v):
    return float(np.max(np.abs(np.asarray(u, dtype=float) - np.asarray(v, dtype=float))))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    backends = available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; timing the numpy fallback only")
    data = workloads(np.random.Generator(np.random.Philox(args.seed)))
    print(f"{'kernel':26s}" + "".join(f"{b + ' ms':>12s}" for b in backends) + f"{'speedup':>10s}{'max|diff|':>12s}")
    for name in KERNEL_NAMES:
        inputs = data[name]
        times, outs = {}, {}
        for b in backends:
            fn = getattr(get_backend(b), name)
            outs[b] = fn(*inputs)
            times[b] = min(timeit.repeat(lambda: fn(*inputs), number=1, repeat=args.repeat)) * 1e3
        row = f"{name:26s}" + "".join(f"{times[b]:12.3f}" for b in backends)
        if len(backends) == 2:
            row += f"{times['python'] / times['cython']:9.1f}x{max_diff(outs['cython'], outs['python']):12.2e}"
        print(row)


if __name__ == "__main__":
    main()
