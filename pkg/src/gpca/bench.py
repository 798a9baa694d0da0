"""Wall-clock scaling of the attention forward pass in the channel count."""

import time
from dataclasses import dataclass

import numpy as np

from .attention import KernelParams, Variant, VariantSpec, gpca_forward


@dataclass
class BenchRow:
    C: int
    variant: str
    median_ns: float
    fitted_slope: float


def time_call(fn, repetitions=11, warmups=3):
    """Median of ``repetitions`` monotonic timings (ns) after ``warmups`` untimed calls."""
    if repetitions < 1:
        raise ValueError("need at least one repetition")
    for _ in range(warmups):
        fn()
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return float(np.median(samples))


def loglog_slope(c_values, times):
    """Least-squares slope of log(time) against log(C)."""
    return float(np.polyfit(np.log(np.asarray(c_values, float)), np.log(np.asarray(times, float)), 1)[0])


def variant_from_name(name, group_size=16, gamma=2.0, b=1.0):
    kind = Variant(name.lower())
    return VariantSpec(kind, group_size=group_size, gamma=gamma, b=b)


def bench_scaling(c_values=(64, 128, 256, 512), spatial=16, repetitions=11, warmups=3,
                  variants=("full", "local", "mha"), group_size=16, batch=32, seed=0):
    """Median forward time per (variant, C) and the fitted log-log slope per variant.

    Each timed call runs one batch of ``batch`` independent samples, so
    per-call interpreter overhead is amortized and the timings track the
    per-sample arithmetic.
    """
    c_values = sorted(set(int(c) for c in c_values))
    if len(c_values) < 3:
        raise ValueError("slope fitting needs at least three distinct C values")
    rng = np.random.default_rng(seed)
    inputs = {C: rng.normal(size=(batch, C, spatial)) / np.sqrt(spatial) for C in c_values}
    params = KernelParams()
    rows = []
    for name in variants:
        variant = variant_from_name(name, group_size)
        times = [time_call(lambda x=inputs[C]: gpca_forward(x, params, variant), repetitions, warmups)
                 for C in c_values]
        slope = loglog_slope(c_values, times)
        rows += [BenchRow(C, variant.kind.value, t, slope) for C, t in zip(c_values, times)]
    return rows
