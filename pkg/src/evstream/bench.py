"""Throughput and latency measurement harness.

Methodology: synthetic events with uniform spacing at the requested rate
and uniformly random positions/polarities are pushed through the engine in
fixed-size chunks on one core; per-event cost excludes I/O and input
generation.  Percentiles are taken over per-chunk means (single-event
timer reads would be dominated by clock granularity at ~1 us/event).
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .engine import Engine, EngineConfig, OnDemandHeads
from .events import EVENT_DTYPE, SensorGeometry
from .lut import FeatureLut, build_lut, lookup
from .nn import MlpModel, forward_block


@dataclass
class BenchReport:
    k: int
    rate_meps: float
    events: int = 0
    wall_s: float = 0.0
    us_per_event_mean: float = 0.0
    us_per_event_p50: float = 0.0
    us_per_event_p99: float = 0.0
    meps: float = 0.0
    head_query_us_mean: float = 0.0
    head_query_us_p99: float = 0.0
    lut_speedup: float = 0.0

    def format_lines(self) -> list:
        return [f"{name}={getattr(self, name)}" for name in (
            "k", "rate_meps", "events", "wall_s", "us_per_event_mean",
            "us_per_event_p50", "us_per_event_p99", "meps",
            "head_query_us_mean", "head_query_us_p99", "lut_speedup")]


def pin_to_single_core() -> bool:
    """Best-effort affinity pin; returns whether it took effect."""
    try:
        cpus = sorted(os.sched_getaffinity(0))
        os.sched_setaffinity(0, {cpus[0]})
        return True
    except (AttributeError, OSError):
        return False


def uniform_random_events(rng: np.random.Generator, geometry: SensorGeometry,
                          n: int, rate_meps: float, t0: int = 0) -> np.ndarray:
    """Temporally uniform events at ``rate_meps`` with random positions."""
    arr = np.empty(n, dtype=EVENT_DTYPE)
    arr["t"] = t0 + np.floor(np.arange(n, dtype=np.float64) / rate_meps).astype(np.int64)
    arr["x"] = rng.integers(0, geometry.width, n)
    arr["y"] = rng.integers(0, geometry.height, n)
    arr["p"] = rng.choice(np.array([-1, 1], dtype=np.int8), n)
    return arr


def _naive_feature_us(model: MlpModel, geometry: SensorGeometry,
                      rng: np.random.Generator, n: int = 400) -> float:
    """Per-event cost of running mlp1+mlp2 forward instead of the table."""
    from .nn import encode_event_inputs, fold_block
    m1 = fold_block(model.mlp1)
    m2 = fold_block(model.mlp2)
    xs = rng.integers(0, geometry.width, n)
    ys = rng.integers(0, geometry.height, n)
    ps = rng.choice(np.array([-1, 1]), n)
    inputs = encode_event_inputs(xs, ys, ps, geometry)
    t0 = time.perf_counter()
    for i in range(n):
        local, _ = forward_block(m1, inputs[i:i + 1], training=False)
        forward_block(m2, local, training=False)
    return (time.perf_counter() - t0) / n * 1e6


def _lookup_us(lut: FeatureLut, rng: np.random.Generator, n: int = 4000) -> float:
    xs = rng.integers(0, lut.geometry.width, n)
    ys = rng.integers(0, lut.geometry.height, n)
    ps = rng.choice(np.array([-1, 1]), n)
    t0 = time.perf_counter()
    for i in range(n):
        lookup(lut, xs[i], ys[i], ps[i])
    return (time.perf_counter() - t0) / n * 1e6


def run_bench(model: MlpModel, lut: FeatureLut,
              rate_meps: float = 1.0, duration_s: float = 2.0,
              tau_us: int = 32000, seed: int = 0, chunk: int = 1024,
              head_queries: int = 200, pin_core: bool = True,
              measure_speedup: bool = True) -> BenchReport:
    """Measure per-event update cost, head-query latency, and the
    table-vs-MLP speedup.  Zero duration yields an empty report."""
    report = BenchReport(k=model.k, rate_meps=rate_meps)
    n = int(rate_meps * 1e6 * duration_s)
    if n == 0:
        return report
    if pin_core:
        pin_to_single_core()
    rng = np.random.default_rng(seed)
    events = uniform_random_events(rng, lut.geometry, n, rate_meps)
    engine = Engine(EngineConfig(lut=lut, tau_us=tau_us))
    heads = OnDemandHeads.from_model(model)

    # Warm the compiled kernel before timing.
    engine.push(events[:min(chunk, n)])
    engine.reset()

    chunk_times = []
    chunk_sizes = []
    query_every = max(1, (n // chunk) // max(head_queries, 1))
    head_samples = []
    pos = 0
    chunk_no = 0
    wall0 = time.perf_counter()
    while pos < n:
        hi = min(pos + chunk, n)
        t0 = time.perf_counter()
        engine.push(events[pos:hi])
        chunk_times.append(time.perf_counter() - t0)
        chunk_sizes.append(hi - pos)
        pos = hi
        chunk_no += 1
        if chunk_no % query_every == 0 and len(head_samples) < head_queries:
            snap = engine.snapshot()
            q0 = time.perf_counter()
            heads.infer_global(snap, snap.last_t)
            head_samples.append((time.perf_counter() - q0) * 1e6)
    wall = time.perf_counter() - wall0

    # Throughput uses the pure update time; percentiles are over per-chunk
    # means (chunk size documented via ``chunk``).
    chunk_times = np.asarray(chunk_times)
    samples = chunk_times / np.asarray(chunk_sizes) * 1e6
    update_s = float(chunk_times.sum())
    report.events = n
    report.wall_s = wall
    report.us_per_event_mean = update_s / n * 1e6
    report.us_per_event_p50 = float(np.percentile(samples, 50))
    report.us_per_event_p99 = float(np.percentile(samples, 99))
    report.meps = n / update_s / 1e6
    if head_samples:
        hs = np.asarray(head_samples)
        report.head_query_us_mean = float(hs.mean())
        report.head_query_us_p99 = float(np.percentile(hs, 99))
    if measure_speedup:
        naive = _naive_feature_us(model, lut.geometry, rng)
        fast = _lookup_us(lut, rng)
        report.lut_speedup = naive / fast if fast > 0 else float("inf")
    return report


def make_bench_model(k: int, geometry: SensorGeometry, seed: int = 0):
    """Random model + table sized for benchmarking (weights irrelevant to
    timing)."""
    sizes = {"mlp1": (64, 64), "mlp2": (64, 128, None),
             "mlp3": (256, 128, None), "mlp4": (256, 128, None)}
    model = MlpModel.create(k=k, n_classes=2, reg_out=2, sizes=sizes, seed=seed)
    return model, build_lut(model, geometry)
