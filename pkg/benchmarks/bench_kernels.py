"""Compiled vs numpy mixture kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Times both backends on the same inputs over a few (n, K, d) shapes and
checks they agree to 1e-10 before reporting.
"""
import argparse
import timeit

import numpy as np

from dsmbias import _pykernels

try:
    from dsmbias import _ckernels
except ImportError:
    _ckernels = None

SHAPES = [(1024, 2, 1), (20000, 2, 1), (20000, 3, 2), (4096, 16, 4), (100000, 8, 1)]


def inputs(n, k, d, rng):
    x = rng.normal(0.0, 3.0, (n, d))
    means = rng.normal(size=(k, d))
    var = rng.uniform(0.1, 2.0, (k, d))
    logw = np.log(rng.dirichlet(np.ones(k)))
    return x, means, var, logw, rng.normal(size=(n, d))


def as_tuple(out):
    return out if isinstance(out, tuple) else (out,)


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; only the numpy backend is available")
        return
    rng = np.random.default_rng(0)
    print(f"{'n':>7} {'K':>3} {'d':>2}  {'kernel':<12} {'numpy ms':>9} {'cython ms':>10} {'speedup':>8}")
    for n, k, d in SHAPES:
        x, means, var, logw, u = inputs(n, k, d, rng)
        for name, call in (
            ("logpdf+score", lambda m: m.mixture_logpdf_score(x, means, var, logw)),
            ("score hvp", lambda m: m.mixture_score_hvp(x, means, var, logw, u)),
        ):
            py_out, c_out = call(_pykernels), call(_ckernels)
            for a, b in zip(as_tuple(py_out), as_tuple(c_out)):
                assert np.max(np.abs(a - b)) <= 1e-10, name
            t_py = best(lambda: call(_pykernels), args.repeat)
            t_c = best(lambda: call(_ckernels), args.repeat)
            print(f"{n:>7} {k:>3} {d:>2}  {name:<12} {1e3 * t_py:>9.2f} {1e3 * t_c:>10.2f} {t_py / t_c:>7.1f}x")


if __name__ == "__main__":
    main()
