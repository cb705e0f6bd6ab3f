"""Time the windowed cross-covariance kernel on each available backend.

Usage::

    python3 benchmarks/bench_kernels.py [--size 506] [--window 16 5] [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from tgi import kernels
from tgi.correlation import cross_covariance_map


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=506)
    ap.add_argument("--window", type=int, nargs=2, default=(16, 5))
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    n = args.size
    sig = (rng.random((n, n)) < 0.14) - 0.14
    idl = (rng.random((n, n)) < 0.04) - 0.04
    ex, ey = args.window
    dx0, dy0 = -(ex // 2), -(ey // 2)
    bounds = (dy0, dy0 + ey - 1, dx0, dx0 + ex - 1)

    ref = None
    print(f"{n}x{n} frames, {ex}x{ey} shifts, best of {args.repeat}")
    for backend in kernels.available_backends():
        out = kernels.xcov_window(sig, idl, *bounds, backend=backend)
        if ref is None:
            ref = out
        else:
            np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-9)
        t = min(timeit.repeat(lambda: kernels.xcov_window(sig, idl, *bounds, backend=backend),
                              number=1, repeat=args.repeat))
        print(f"  {backend:8s} {1e3 * t:8.2f} ms")
    rng_ = ((dx0, dx0 + ex - 1), (dy0, dy0 + ey - 1))
    t = min(timeit.repeat(lambda: cross_covariance_map(sig, idl, rng_, method="fft"),
                          number=1, repeat=max(3, args.repeat // 4)))
    print(f"  {'fft':8s} {1e3 * t:8.2f} ms")
    print(f"default backend: {kernels.BACKEND}")


if __name__ == "__main__":
    main()
