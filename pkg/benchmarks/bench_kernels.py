"""Times the numba kernels against their numpy fallbacks.

Run: python benchmarks/bench_kernels.py [N] [D]
"""
import sys
import time

import numpy as np

from racon import kernels

if not kernels.NUMBA_ENABLED:
    print("numba path disabled (RACON_DISABLE_NUMBA set or numba missing); nothing to compare")
    sys.exit(0)


def bench(label, fn, *args, repeats=200):
    fn(*args)  # warm (JIT compile on the numba path)
    start = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    per_call = (time.perf_counter() - start) / repeats
    print(f"  {label:22s} {per_call * 1e6:10.1f} us/call")
    return per_call


def main():
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 10_000
    dim = int(sys.argv[2]) if len(sys.argv) > 2 else 30
    rng = np.random.default_rng(0)
    keys = rng.normal(size=(n, dim))
    query = rng.normal(size=dim)
    weights = rng.uniform(0, 2, dim)
    rewards = rng.normal(size=150)
    values = rng.normal(size=151)
    not_done = np.ones(150)

    print(f"distance scan over {n} x {dim} keys:")
    a = bench("numba sq_dists", kernels._numba_sq_dists, keys, query)
    b = bench("numpy sq_dists", kernels._numpy_sq_dists, keys, query)
    print(f"  speedup {b / a:.2f}x")

    print("weighted distance scan:")
    a = bench("numba weighted", kernels._numba_weighted_sq_dists, keys, query, weights)
    b = bench("numpy weighted", kernels._numpy_weighted_sq_dists, keys, query, weights)
    print(f"  speedup {b / a:.2f}x")

    print("advantage recursion over 150 steps:")
    a = bench("numba gae_scan", kernels._numba_gae_scan, rewards, values, not_done, 0.97, 0.95)
    b = bench("numpy gae_scan", kernels._numpy_gae_scan, rewards, values, not_done, 0.97, 0.95)
    print(f"  speedup {b / a:.2f}x")

    for name, fast, slow, args in (
        ("sq_dists", kernels._numba_sq_dists, kernels._numpy_sq_dists, (keys, query)),
        (
            "weighted_sq_dists",
            kernels._numba_weighted_sq_dists,
            kernels._numpy_weighted_sq_dists,
            (keys, query, weights),
        ),
        ("gae_scan", kernels._numba_gae_scan, kernels._numpy_gae_scan, (rewards, values, not_done, 0.97, 0.95)),
    ):
        if not np.allclose(fast(*args), slow(*args), rtol=1e-12, atol=1e-12):
            print(f"MISMATCH in {name}")
            sys.exit(1)
    print("paths agree within 1e-12")


if __name__ == "__main__":
    main()
