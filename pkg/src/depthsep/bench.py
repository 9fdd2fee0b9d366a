"""Wall-clock micro-benchmarks for the fast execution paths.

Each measurement runs a fixed number of warmup calls (so jit compilation and
cache effects are excluded), then records wall time for every repetition and
reports the median. Throughput is derived from the analytic mult-add count,
2 flops per mult-add, so the number is comparable across layer shapes.

Time shares per layer type come from summing per-layer medians over one
forward pass; they mirror the cost model's mult-add shares but are hardware
measurements, so they are reported, never asserted.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from depthsep.arch import ArchDescriptor, LayerKind
from depthsep.cost import kind_label, layer_cost
from depthsep.gemm import (
    conv2d_depthwise_fast,
    conv2d_pointwise_gemm,
    conv2d_std_gemm,
    gemm,
)
from depthsep.ops import ConvConfig

DEFAULT_WARMUPS = 3
DEFAULT_REPS = 5


@dataclass(frozen=True)
class BenchReport:
    op: str
    shape: str
    samples_ns: tuple[int, ...]
    median_ns: float
    mult_adds: int
    effective_gflops: float


def bench_callable(
    op: str,
    shape: str,
    fn,
    mult_adds: int,
    reps: int = DEFAULT_REPS,
    warmups: int = DEFAULT_WARMUPS,
) -> BenchReport:
    if reps < 1:
        raise ValueError("need at least one repetition")
    for _ in range(warmups):
        fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    median = float(statistics.median(sorted(samples)))
    gflops = 2.0 * mult_adds / median if median > 0 else float("inf")
    return BenchReport(op, shape, tuple(samples), median, mult_adds, gflops)


def bench_gemm(m: int, k: int, n: int, reps: int = DEFAULT_REPS, seed: int = 0) -> BenchReport:
    rng = np.random.Generator(np.random.PCG64(seed))
    a = rng.standard_normal((m, k), dtype=np.float32)
    b = rng.standard_normal((k, n), dtype=np.float32)
    return bench_callable("gemm", f"{m}x{k}x{n}", lambda: gemm(a, b), m * k * n, reps)


def _layer_fn(spec, x: np.ndarray, kern: np.ndarray):
    cfg = ConvConfig(stride=spec.stride)
    if spec.kind is LayerKind.CONV_STD:
        return lambda: conv2d_std_gemm(x, kern, cfg)
    if spec.kind is LayerKind.CONV_DW:
        return lambda: conv2d_depthwise_fast(x, kern, cfg)
    if spec.kind is LayerKind.CONV_PW:
        return lambda: conv2d_pointwise_gemm(x, kern)
    raise ValueError(f"layer kind {spec.kind} is not benchmarkable")


def bench_layer(spec, batch: int = 1, reps: int = DEFAULT_REPS, seed: int = 0) -> BenchReport:
    """Benchmark one conv layer at its architecture shape with random data."""
    rng = np.random.Generator(np.random.PCG64(seed))
    x = rng.standard_normal(
        (batch, spec.in_size, spec.in_size, spec.in_channels), dtype=np.float32
    )
    if spec.kind is LayerKind.CONV_STD:
        kern = rng.standard_normal(
            (spec.kernel, spec.kernel, spec.in_channels, spec.out_channels), dtype=np.float32
        )
    elif spec.kind is LayerKind.CONV_DW:
        kern = rng.standard_normal((spec.kernel, spec.kernel, spec.in_channels), dtype=np.float32)
    elif spec.kind is LayerKind.CONV_PW:
        kern = rng.standard_normal((1, 1, spec.in_channels, spec.out_channels), dtype=np.float32)
    else:
        raise ValueError(f"layer kind {spec.kind} is not benchmarkable")
    ma = layer_cost(spec).mult_adds * batch
    detail = f"{spec.kind.value}@{spec.in_size}x{spec.in_size}x{spec.in_channels}->{spec.out_channels}"
    return bench_callable(spec.kind.value, detail, _layer_fn(spec, x, kern), ma, reps)


@dataclass(frozen=True)
class ForwardBench:
    layers: tuple[BenchReport, ...]
    total_median_ns: float
    time_shares: dict[str, float]  # layer-type label -> percent of summed medians


def bench_forward(
    arch: ArchDescriptor, batch: int = 1, reps: int = DEFAULT_REPS, seed: int = 0
) -> ForwardBench:
    """Per-layer timings for one forward pass, aggregated by layer type."""
    reports = []
    by_label: dict[str, float] = {}
    for spec in arch.layers:
        if spec.kind not in (LayerKind.CONV_STD, LayerKind.CONV_DW, LayerKind.CONV_PW):
            continue
        rep = bench_layer(spec, batch=batch, reps=reps, seed=seed)
        reports.append(rep)
        label = kind_label(spec.kind)
        by_label[label] = by_label.get(label, 0.0) + rep.median_ns
    total = sum(by_label.values())
    shares = {label: 100.0 * ns / total for label, ns in by_label.items()} if total else {}
    return ForwardBench(tuple(reports), total, shares)


def csv_rows(reports) -> list[str]:
    """One CSV row per measurement: op,shape,median_ns,mult_adds,gflops."""
    rows = ["op,shape,median_ns,mult_adds,gflops"]
    rows.extend(
        f"{r.op},{r.shape},{r.median_ns:.0f},{r.mult_adds},{r.effective_gflops:.3f}"
        for r in reports
    )
    return rows
