#!/usr/bin/env python3
"""Benchmark the numba and pure-numpy paths of the hot kernels.

Usage:
    python3 benchmarks/bench_kernels.py [--sweeps 2000] [--sizes 32 64 128]

The same pre-drawn proposal stream feeds both backends, so the timings
compare identical work.  MSPARISI_NUMBA=0 would disable the jit path at
import time; this script asks for each backend explicitly instead.
"""

import argparse
import time

import numpy as np

from msparisi import kernels
from msparisi.model import SpeciesCounts, make_model
from msparisi.parisi import compute_levels, inner_min_b
from msparisi.admissible import AdmissiblePair, DiscreteMeasure, identity_map
from msparisi.simulate import (build_disorder, init_chain, prepare,
                               random_configuration)


def bench_sweeps(n, sweeps, backend):
    model = make_model(["a", "b"], [0.5, 0.5], [(2, 0.8, 1.0)])
    counts = SpeciesCounts([n // 2, n - n // 2])
    disorder = build_disorder(model, counts, seed=1)
    prep = prepare(model, counts, disorder)
    rng = np.random.default_rng(0)
    state = init_chain(prep, random_configuration(counts, rng))
    # warm up (jit compilation happens here, outside the timed region)
    kernels.run_sweeps(state.sigma, prep.h1, prep.S2, prep.S3, state.f2,
                       state.f3, prep.has_p1, prep.has_p2, prep.has_p3,
                       prep.sp_start, prep.sp_size, prep.sp_of,
                       1.0, 2, 0.6, rng, backend=backend)
    t0 = time.perf_counter()
    kernels.run_sweeps(state.sigma, prep.h1, prep.S2, prep.S3, state.f2,
                       state.f3, prep.has_p1, prep.has_p2, prep.has_p3,
                       prep.sp_start, prep.sp_size, prep.sp_of,
                       1.0, sweeps, 0.6, rng, backend=backend)
    return time.perf_counter() - t0


def bench_solver(reps, backend):
    model = make_model(["a", "b"], [0.4, 0.6], [(2, 1.2, 1.0), (3, 0.5, 1.0)])
    meas = DiscreteMeasure(m=[0.0, 0.3, 0.7, 1.0], q=[0.1, 0.5, 0.9])
    pair = AdmissiblePair(measure=meas, map=identity_map(2))
    lev = compute_levels(model, pair)
    num0 = lev.u[:, 1].copy()
    du = np.maximum(lev.d[:, 1:lev.k + 1] - lev.d[:, 2:lev.k + 2], 0.0) / lev.m[1:]
    kernels.solve_b(num0, lev.d, du, backend=backend)  # warm up
    t0 = time.perf_counter()
    for _ in range(reps):
        kernels.solve_b(num0, lev.d, du, backend=backend)
    return time.perf_counter() - t0


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sweeps", type=int, default=2000)
    ap.add_argument("--sizes", type=int, nargs="+", default=[32, 64, 128])
    args = ap.parse_args()

    if not kernels.NUMBA_ENABLED:
        print("numba unavailable or disabled; only the numpy path will run")
    backends = ["numba", "numpy"] if kernels.NUMBA_ENABLED else ["numpy"]

    print(f"{'kernel':<24}{'size':>8}" + "".join(f"{b:>14}" for b in backends)
          + f"{'speedup':>10}")
    for n in args.sizes:
        times = [bench_sweeps(n, args.sweeps, b) for b in backends]
        per = [f"{t / args.sweeps * 1e6:10.1f} us" for t in times]
        ratio = f"{times[-1] / times[0]:9.1f}x" if len(times) == 2 else "      -"
        print(f"{'metropolis sweep':<24}{n:>8}" + "".join(f"{p:>14}" for p in per) + ratio)

    reps = 20_000
    times = [bench_solver(reps, b) for b in backends]
    per = [f"{t / reps * 1e6:10.1f} us" for t in times]
    ratio = f"{times[-1] / times[0]:9.1f}x" if len(times) == 2 else "      -"
    print(f"{'inner b solve':<24}{'-':>8}" + "".join(f"{p:>14}" for p in per) + ratio)

    # end-to-end flavor: one full functional evaluation
    model = make_model(["a", "b"], [0.4, 0.6], [(2, 1.2, 1.0)])
    meas = DiscreteMeasure(m=[0.0, 0.3, 0.7, 1.0], q=[0.1, 0.5, 0.9])
    pair = AdmissiblePair(measure=meas, map=identity_map(2))
    t0 = time.perf_counter()
    for _ in range(2000):
        inner_min_b(model, pair)
    dt = (time.perf_counter() - t0) / 2000 * 1e6
    print(f"{'full inner_min_b':<24}{'-':>8}{dt:10.1f} us   (default backend: "
          f"{kernels.BACKEND})")


if __name__ == "__main__":
    main()
