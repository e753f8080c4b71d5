"""Compare the compiled and pure numpy kernels on random inputs.

    python benchmarks/bench_kernels.py [--sizes 1000 10000 100000] [--repeat 5]

Prints the best-of-``repeat`` wall time per call for each backend, the
speed-up, and the largest relative disagreement between the two outputs.
"""
import argparse
import timeit

import numpy as np

from fedci import _kernels_py

try:
    from fedci import _kernels as _ext
except ImportError:  # extension not built
    _ext = None


def cox_inputs(n, d, rng):
    X = rng.standard_normal((n, d))
    eta = X @ rng.normal(scale=0.5, size=d)
    time = np.round(rng.exponential(size=n), 2)  # rounding creates ties
    event = (rng.random(n) < 0.7).astype(np.int8)
    order = np.argsort(-time, kind="stable")
    return (np.ascontiguousarray(X[order]), np.ascontiguousarray(eta[order]), event[order], time[order])


def table_inputs(n, rng, causes=2):
    time = np.sort(np.round(rng.exponential(size=n), 2))
    delta = rng.integers(0, causes + 1, size=n).astype(np.int64)
    return time, delta, causes


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(a)), initial=0.0))


def best(fn, args, repeat):
    t = timeit.Timer(lambda: fn(*args))
    number = max(1, int(0.2 / max(t.timeit(1), 1e-6)))
    return min(t.repeat(repeat, number)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[1_000, 10_000, 100_000])
    ap.add_argument("--d", type=int, default=5)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if _ext is None:
        print("compiled kernels not built; timing the numpy backend only")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<12} {'n':>8} {'numpy [ms]':>11} {'cython [ms]':>12} {'speed-up':>9} {'max rel diff':>12}")
    for n in args.sizes:
        cases = [
            ("cox_breslow", "cox_breslow", cox_inputs(n, args.d, rng)),
            ("event_table", "event_table", table_inputs(n, rng)),
        ]
        for label, name, inp in cases:
            py = best(getattr(_kernels_py, name), inp, args.repeat)
            if _ext is None:
                print(f"{label:<12} {n:>8} {py * 1e3:>11.3f} {'-':>12} {'-':>9} {'-':>12}")
                continue
            cy = best(getattr(_ext, name), inp, args.repeat)
            diff = max_diff(getattr(_kernels_py, name)(*inp), getattr(_ext, name)(*inp))
            print(f"{label:<12} {n:>8} {py * 1e3:>11.3f} {cy * 1e3:>12.3f} {py / cy:>9.1f} {diff:>12.2e}")


if __name__ == "__main__":
    main()
