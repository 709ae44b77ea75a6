"""Time the compiled kernels against the numpy fallback on certification-sized inputs.

    python benchmarks/bench_kernels.py [--m 2000] [--n 600] [--N 64] [--repeat 3]
"""
import argparse
import timeit

import numpy as np

from gausspac import _kernels_py, kernels


def inputs_count(m, n, q, N, seed=0):
    rng = np.random.default_rng(seed)
    a = np.ascontiguousarray(rng.uniform(0.1, 1.0, (m, n)))
    b = np.ascontiguousarray(rng.standard_normal((m, n)))
    labels = rng.integers(0, q, m).astype(np.int64)
    z0 = rng.standard_normal((N, n))
    z1 = rng.standard_normal((N, q))
    mu1 = np.ascontiguousarray(rng.standard_normal((q, n)) / np.sqrt(n))
    s1 = np.full((q, n), 1.0 / n)
    return a, b, labels, z0, z1, mu1, s1, True


def inputs_psi(d, samples, seed=0):
    rng = np.random.default_rng(seed)
    S = rng.standard_normal((d, d))
    return np.ascontiguousarray(S / d), rng.standard_normal(d), rng.standard_normal((samples, d))


def bench(name, fn_fast, fn_slow, args, repeat):
    t_fast = min(timeit.repeat(lambda: fn_fast(*args), number=1, repeat=repeat))
    t_slow = min(timeit.repeat(lambda: fn_slow(*args), number=1, repeat=repeat))
    as_tuple = lambda r: r if isinstance(r, tuple) else (r,)
    same = all(np.allclose(x, y, rtol=1e-12, atol=1e-12)
               for x, y in zip(as_tuple(fn_fast(*args)), as_tuple(fn_slow(*args))))
    print(f"{name:14s} compiled {t_fast * 1e3:9.2f} ms   numpy {t_slow * 1e3:9.2f} ms   "
          f"speedup {t_slow / t_fast:5.2f}x   agree={same}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--m", type=int, default=2000)
    ap.add_argument("--n", type=int, default=600)
    ap.add_argument("--q", type=int, default=2)
    ap.add_argument("--N", type=int, default=64)
    ap.add_argument("--psi-d", type=int, default=9)
    ap.add_argument("--psi-samples", type=int, default=100_000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    fast = kernels.compiled()
    if fast is None:
        print("compiled extension not built; only the numpy backend is available")
        return 1
    bench("count_errors", fast.count_errors, _kernels_py.count_errors,
          inputs_count(args.m, args.n, args.q, args.N), args.repeat)
    bench("psi_max_stats", fast.psi_max_stats, _kernels_py.psi_max_stats,
          inputs_psi(args.psi_d, args.psi_samples), args.repeat)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
