"""Timing harness for the correlation kernels.

Measures the serial kernel against the row-parallel one on the training-size
workload and reports the speedup alongside the visible core count.  Minimum
over repetitions is used so the numbers are stable on a busy machine.
"""
from __future__ import annotations

import os
import time

import numpy as np

from . import _corrkern
from .flowops import correlate


def _time(fn, reps: int) -> float:
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_correlation_benchmark(shape=(1, 32, 64, 64), radius: int = 4,
                              reps: int = 30, dtype=np.float32) -> dict:
    rng = np.random.default_rng(0)
    f1 = rng.standard_normal(shape).astype(dtype)
    f2 = rng.standard_normal(shape).astype(dtype)
    # compile both kernels outside the timed region
    serial = correlate(f1, f2, radius, parallel=False)
    parallel = correlate(f1, f2, radius, parallel=True)
    if not np.array_equal(serial, parallel):
        raise AssertionError("serial and parallel correlation kernels disagree")
    t_serial = _time(lambda: _corrkern.corr_fwd_serial(f1, f2, radius), reps)
    t_parallel = _time(lambda: _corrkern.corr_fwd_parallel(f1, f2, radius), reps)
    return {
        "shape": tuple(shape),
        "radius": radius,
        "dtype": np.dtype(dtype).name,
        "cores": os.cpu_count() or 1,
        "serial_ms": t_serial * 1e3,
        "parallel_ms": t_parallel * 1e3,
        "speedup": t_serial / t_parallel if t_parallel > 0 else float("inf"),
    }


def format_benchmark(result: dict) -> str:
    return (f"correlate {result['shape']} radius={result['radius']} "
            f"[{result['dtype']}] on {result['cores']} cores: "
            f"serial {result['serial_ms']:.2f} ms, "
            f"parallel {result['parallel_ms']:.2f} ms "
            f"({result['speedup']:.2f}x)")
