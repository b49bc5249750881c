"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--nodes 20] [--length 1600] [--repeat 3]

Prints best-of-``repeat`` wall time per kernel and backend, and checks that
both backends agree.
"""
import argparse
import time

import numpy as np

from dkgcm import _kernels


def best_time(fn, repeat):
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--nodes", type=int, default=20)
    p.add_argument("--length", type=int, default=1600)
    p.add_argument("--window", type=int, default=-1)
    p.add_argument("--scan-steps", type=int, default=64)
    p.add_argument("--scan-width", type=int, default=4096)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args(argv)

    rng = np.random.default_rng(0)
    x = rng.normal(size=(args.length, args.nodes))
    a = rng.uniform(0.5, 1.0, (args.scan_steps, args.scan_width))
    b = rng.normal(size=(args.scan_steps, args.scan_width))

    backends = ["python"] + (["cython"] if _kernels.BACKEND == "cython" else [])
    if len(backends) == 1:
        print("compiled kernels unavailable; timing the numpy fallback only")
    results = {}
    print(f"{'kernel':<14}{'backend':<10}{'seconds':>10}")
    for be in backends:
        t, d = best_time(lambda: _kernels.dtw_upper(x, args.window, be, args.threads),
                         args.repeat)
        results[("dtw", be)] = (t, d)
        print(f"{'dtw_matrix':<14}{be:<10}{t:>10.3f}")
        t, h = best_time(lambda: _kernels.linear_scan(a, b, False, be), args.repeat)
        results[("scan", be)] = (t, h)
        print(f"{'linear_scan':<14}{be:<10}{t:>10.4f}")
    if len(backends) == 2:
        for kernel in ("dtw", "scan"):
            (tp, vp), (tc, vc) = results[(kernel, "python")], results[(kernel, "cython")]
            np.testing.assert_allclose(vc, vp, rtol=1e-12, atol=1e-12)
            print(f"{kernel}: compiled is {tp / tc:.1f}x the fallback; outputs agree")


if __name__ == "__main__":
    main()
