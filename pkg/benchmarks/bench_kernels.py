"""Compare the compiled and pure-NumPy step kernels.

Usage: python benchmarks/bench_kernels.py [--sizes 22,110,440] [--reps 2000]

Times the two hot kernels (car-following acceleration, Euler ring step)
at several string sizes and prints per-call timings plus speedup. Both
backends are imported directly so results do not depend on which one the
package selected at import.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from ringflow import _ring_kernel_py as kpy

try:
    from ringflow import _ring_kernel as kc
except ImportError:
    kc = None


def make_inputs(n: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    pos = np.sort(rng.uniform(0.0, 20.0 * n, n))
    vel = rng.uniform(0.0, 30.0, n)
    gap = (np.roll(pos, -1) - pos - 5.0) % (20.0 * n) + 0.5
    accel = rng.uniform(-3.0, 1.3, n)
    return pos, vel, gap, accel


def bench(fn, reps: int) -> float:
    """Best of 5 runs, seconds per call."""
    t = timeit.repeat(fn, number=reps, repeat=5)
    return min(t) / reps


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", default="22,110,440",
                        help="comma-separated string sizes")
    parser.add_argument("--reps", type=int, default=2000)
    args = parser.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]

    if kc is None:
        print("compiled extension not available; timing NumPy backend only")

    header = f"{'kernel':<16}{'n':>6}{'numpy':>12}{'cython':>12}{'speedup':>9}"
    print(header)
    print("-" * len(header))
    for n in sizes:
        pos, vel, gap, accel = make_inputs(n)
        v_lead = np.roll(vel, -1)
        cases = [
            ("idm_accel_ring",
             lambda m: lambda: m.idm_accel_ring(
                 vel, v_lead, gap, 30.0, 1.0, 1.3, 2.0, 4.0, 2.0)),
            ("euler_ring",
             lambda m: lambda: m.euler_ring(pos, vel, gap, accel, 0.2)),
        ]
        for name, build in cases:
            t_py = bench(build(kpy), args.reps)
            if kc is not None:
                t_c = bench(build(kc), args.reps)
                print(f"{name:<16}{n:>6}{t_py * 1e6:>10.2f}us"
                      f"{t_c * 1e6:>10.2f}us{t_py / t_c:>8.1f}x")
            else:
                print(f"{name:<16}{n:>6}{t_py * 1e6:>10.2f}us{'-':>12}{'-':>9}")


if __name__ == "__main__":
    main()
