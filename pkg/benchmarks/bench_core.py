"""Timing comparison of the compiled core against the numpy reference.

Run as: python3 benchmarks/bench_core.py [--repeats N]

Times the two hot kernels on representative shapes: a compactly supported
field occupying a fraction of the grid (the regime the skip-zero compiled
paths target) and a dense one (worst case for skipping). The numpy
convolution already sits on scipy's C path, so gains there come only from
skipping structural zeros; the step kernel avoids all temporaries.
"""

import argparse
import time

import numpy as np

from adhesim._core import numpy_ref

try:
    from adhesim._core import speedups
except ImportError:
    speedups = None


def field_1d(n, fill):
    u = np.zeros(n)
    w = max(2, int(fill * n))
    a = (n - w) // 2
    u[a:a + w] = np.linspace(0.5, 1.5, w)
    return u


def field_2d(n, fill):
    u = np.zeros((n, n))
    w = max(2, int(fill**0.5 * n))
    a = (n - w) // 2
    u[a:a + w, a:a + w] = 1.0 + np.add.outer(np.linspace(0, .5, w),
                                             np.linspace(0, .5, w))
    return u


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_case(name, ref_fn, fast_fn, repeats):
    t_ref = best_of(ref_fn, repeats)
    if fast_fn is None:
        print(f"{name:<34} {t_ref * 1e3:9.3f} ms {'-':>12} {'-':>9}")
        return
    t_fast = best_of(fast_fn, repeats)
    print(f"{name:<34} {t_ref * 1e3:9.3f} ms {t_fast * 1e3:9.3f} ms "
          f"{t_ref / t_fast:8.2f}x")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=7)
    args = ap.parse_args()

    if speedups is None:
        print("compiled core unavailable; timing the numpy reference only\n")

    print(f"{'case':<34} {'numpy':>12} {'cython':>12} {'speedup':>9}")

    rng = np.random.default_rng(0)
    cases = []

    for n, fill in ((8192, 0.25), (8192, 1.0)):
        u = field_1d(n, fill)
        vel = np.ascontiguousarray(rng.uniform(-1, 1, (1, n)))
        box = numpy_ref.active_box(u, pad=1)
        lo, hi = np.asarray(box[0]), np.asarray(box[1])
        a = (u, vel, 2e-6, 1e-3, 0.01, numpy_ref.CHI_SATURATING, 0.5)
        cases.append((
            f"fv_step 1d n={n} fill={fill:.0%}",
            lambda a=a, box=box: numpy_ref.fv_step(*a[:7], None, box),
            None if speedups is None else
            lambda a=a, lo=lo, hi=hi: speedups.fv_step(*a[:7], lo, hi),
        ))

    for n, fill in ((512, 0.06), (512, 1.0)):
        u = field_2d(n, fill)
        vel = np.ascontiguousarray(rng.uniform(-1, 1, (2, n, n)))
        box = numpy_ref.active_box(u, pad=1)
        lo, hi = np.asarray(box[0]), np.asarray(box[1])
        a = (u, vel, 2e-6, 1e-3, 0.01, numpy_ref.CHI_SATURATING, 0.5)
        cases.append((
            f"fv_step 2d {n}^2 fill={fill:.0%}",
            lambda a=a, box=box: numpy_ref.fv_step(*a[:7], None, box),
            None if speedups is None else
            lambda a=a, lo=lo, hi=hi: speedups.fv_step(*a[:7], lo, hi),
        ))

    u = field_1d(8192, 0.25)
    st = rng.uniform(-1, 1, 129)
    lo, hi = np.array([0]), np.array([8192])
    cases.append((
        "convolve 1d n=8192 stencil=129",
        lambda: numpy_ref.convolve_stencil(u, st, 1e-3, lo, hi),
        None if speedups is None else
        lambda: speedups.convolve_stencil(u, st, 1e-3, lo, hi),
    ))

    u2 = field_2d(256, 0.06)
    st2 = rng.uniform(-1, 1, (33, 33))
    lo2, hi2 = np.zeros(2, dtype=int), np.array(u2.shape)
    cases.append((
        "convolve 2d 256^2 stencil=33^2",
        lambda: numpy_ref.convolve_stencil(u2, st2, 1e-3, lo2, hi2),
        None if speedups is None else
        lambda: speedups.convolve_stencil(u2, st2, 1e-3, lo2, hi2),
    ))

    for name, ref_fn, fast_fn in cases:
        bench_case(name, ref_fn, fast_fn, args.repeats)


if __name__ == "__main__":
    main()
