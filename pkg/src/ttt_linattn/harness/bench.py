"""Throughput micro-benchmark: recurrent loop vs the parallel forms.

Every strategy sees the same chunks, initial weights and schedule. The
configuration is static-kernel SwiGLU with momentum and per-chunk rates
and without orthogonalization, so the bilinear form is eligible.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..errors import UnsupportedConfig
from ..fastweight import FastWeightConfig, UpdateSchedule, init_state, random_chunks, recurrent_forward
from ..linear_form import variant6_attention
from ..numerics import make_rng
from ..parallel import (
    ParallelPlan,
    check_parallel_eligible,
    parallel_forward_bilinear,
    parallel_forward_scan,
)

BENCH_STRATEGIES = ("recurrent", "bilinear", "scan", "variant6")
PRECISIONS = {"f64": np.float64, "f32": np.float32}
MIN_REPEATS = 3


def bench_config(dims=(64, 256, 64), chunk_len: int = 64) -> FastWeightConfig:
    d_k, d_h, d_v = dims
    return FastWeightConfig(
        d_k=d_k, d_v=d_v, d_h=d_h, chunk_len=chunk_len,
        update_gate_weights=False, use_momentum=True, use_muon=False,
    )


@dataclass
class BenchSpec:
    strategies: Sequence[str] = BENCH_STRATEGIES
    dims: tuple = (64, 256, 64)
    n_chunks: int = 64
    chunk_len: int = 64
    repeats: int = 5
    precision: str = "f64"
    warmup: int = 1
    seed: int = 0
    config: Optional[FastWeightConfig] = None
    threads: Optional[int] = None

    def __post_init__(self):
        if self.repeats < MIN_REPEATS:
            raise ValueError(f"repeats must be >= {MIN_REPEATS}, got {self.repeats}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")
        bad = [s for s in self.strategies if s not in BENCH_STRATEGIES]
        if bad:
            raise ValueError(f"unknown strategies {bad}; expected {BENCH_STRATEGIES}")
        if self.n_chunks < 1 or self.chunk_len < 1 or min(self.dims) < 1:
            raise ValueError("dims, n_chunks and chunk_len must be positive")

    def resolved_config(self) -> FastWeightConfig:
        if self.config is not None:
            return self.config.replace(chunk_len=self.chunk_len)
        return bench_config(self.dims, self.chunk_len)


@dataclass
class BenchRecord:
    strategy: str
    d_k: int
    d_h: int
    d_v: int
    N: int
    L: int
    repeats: int
    precision: str
    tps_mean: float
    tps_std: float
    tps_median: float
    times: list = field(default_factory=list)

    def __post_init__(self):
        if self.repeats < MIN_REPEATS:
            raise ValueError("BenchRecord: repeats must be >= 3")
        if not self.tps_mean > 0:
            raise ValueError("BenchRecord: tokens/sec must be positive")

    def to_record(self) -> dict:
        rec = {k: getattr(self, k) for k in (
            "strategy", "d_k", "d_h", "d_v", "N", "L", "repeats", "precision",
            "tps_mean", "tps_std", "tps_median")}
        return rec


def _runner(strategy: str, chunks, state0, schedule, config, threads):
    if strategy == "recurrent":
        return lambda: recurrent_forward(chunks, state0, schedule, config, record=False)
    if strategy == "variant6":
        W = np.zeros((config.d_k, config.d_v), dtype=state0.W1.dtype)
        return lambda: variant6_attention(chunks, W)
    check_parallel_eligible(config, strategy)
    plan = ParallelPlan.from_config(config, schedule, strategy, threads=threads)
    fn = parallel_forward_bilinear if strategy == "bilinear" else parallel_forward_scan
    return lambda: fn(chunks, state0.W1, state0.W0, state0.W2, plan)


def _cast_state(state, dtype):
    arrays = {k: (None if v is None else np.asarray(v, dtype=dtype)) for k, v in vars(state).items()}
    return type(state)(**arrays)


def run_bench(spec: BenchSpec) -> list:
    """One BenchRecord per strategy; raises UnsupportedConfig before timing anything."""
    config = spec.resolved_config()
    dtype = PRECISIONS[spec.precision]
    rng = make_rng(spec.seed)
    state0 = _cast_state(init_state(config, rng), dtype)
    chunks = [
        type(c)(*(np.asarray(x, dtype=dtype) for x in c))
        for c in random_chunks(rng, spec.n_chunks, config.chunk_len, config.d_k, config.d_v, 0.5)
    ]
    schedule = UpdateSchedule(
        tuple(rng.uniform(0.02, 0.2, size=spec.n_chunks)),
        tuple(rng.uniform(0.0, 0.9, size=spec.n_chunks)),
    )
    runners = {s: _runner(s, chunks, state0, schedule, config, spec.threads) for s in spec.strategies}

    tokens = spec.n_chunks * config.chunk_len
    records = []
    for strategy, fn in runners.items():
        for _ in range(spec.warmup):
            fn()
        times = []
        for _ in range(spec.repeats):
            t0 = time.perf_counter()
            fn()
            times.append(max(time.perf_counter() - t0, 1e-9))
        tps = [tokens / t for t in times]
        records.append(BenchRecord(
            strategy=strategy, d_k=config.d_k, d_h=config.d_h, d_v=config.d_v,
            N=spec.n_chunks, L=config.chunk_len, repeats=spec.repeats, precision=spec.precision,
            tps_mean=statistics.fmean(tps), tps_std=statistics.stdev(tps), tps_median=statistics.median(tps),
            times=times,
        ))
    return records


def speedups(records: Sequence[BenchRecord], baseline: str = "recurrent") -> dict:
    """Median tokens/sec of each strategy divided by the baseline's."""
    base = [r for r in records if r.strategy == baseline]
    if not base:
        return {}
    ref = base[0].tps_median
    return {r.strategy: r.tps_median / ref for r in records if r.strategy != baseline}


__all__ = [
    "BENCH_STRATEGIES", "BenchRecord", "BenchSpec", "UnsupportedConfig",
    "bench_config", "run_bench", "speedups",
]
