"""Suites, benchmarks and reports behind the ``ttt-la`` command."""

from .bench import BenchRecord, BenchSpec, run_bench, speedups
from .report import emit_report, load_json_report
from .suites import DEFAULT_TOLS, SUITES, Sizes, SuiteResult, run_suite

__all__ = [
    "BenchRecord", "BenchSpec", "DEFAULT_TOLS", "SUITES", "Sizes", "SuiteResult",
    "emit_report", "load_json_report", "run_bench", "run_suite", "speedups",
]
