"""Compare the compiled kernels with the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--quick]

Prints one row per kernel and shape with the best-of-N time for each
backend, the speed-up, and the max abs difference between their outputs.
"""
import argparse
import timeit

import numpy as np

from sessa_lab import _fallback

try:
    from sessa_lab import _kernels
except ImportError:  # extension not built
    _kernels = None


def cases(rng, quick):
    sizes = [(16, 64, 64)] if quick else [(16, 64, 64), (16, 256, 64), (4, 1024, 16)]
    for n, T, D in sizes:
        B = np.tril(rng.uniform(0, 1.0 / T, (n, T, T)), -1)
        f = rng.standard_normal((n, T, D))
        yield "forward_substitution", (n, T, D), (B, f)
        yield "backward_substitution", (n, T, D), (B, f)
        decay = rng.uniform(0.5, 1.0, (n, T, D))
        yield "linear_scan", (n, T, D), (decay, f)
        h = _fallback.linear_scan(decay, f)
        yield "linear_scan_adjoint", (n, T, D), (decay, h, f)
    for T in ([4096] if quick else [4096, 65536]):
        yield "uniform_impulse", (T,), (0.5, 0, T)


def best(fn, args, repeat):
    number = max(1, int(0.05 / max(timeit.timeit(lambda: fn(*args), number=1), 1e-6)))
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22} {'shape':<16} {'python ms':>10} {'compiled ms':>12} {'speed-up':>9} {'max diff':>9}")
    for name, shape, args_ in cases(rng, args.quick):
        py, cy = getattr(_fallback, name), getattr(_kernels, name)
        t_py = best(py, args_, args.repeat)
        t_cy = best(cy, args_, args.repeat)
        diff = max_diff(py(*args_), cy(*args_))
        print(f"{name:<22} {str(shape):<16} {1e3 * t_py:10.3f} {1e3 * t_cy:12.3f} "
              f"{t_py / t_cy:8.1f}x {diff:9.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
