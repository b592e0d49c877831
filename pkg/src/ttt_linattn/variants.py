"""The six-step reduction from a LaCT-style layer to plain linear attention."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import BadVariant, UnsupportedConfig
from .fastweight import (
    FastWeightConfig,
    UpdateSchedule,
    init_state,
    random_chunks,
    recurrent_forward,
)
from .linear_form import variant6_attention
from .numerics import make_rng, max_abs_diff, max_abs_diff_list
from .parallel import ParallelPlan, parallel_eligible, parallel_forward_bilinear, parallel_forward_scan

# (config field, value after the step, description)
LADDER = (
    ("update_gate_weights", False, "update only the last layer"),
    ("use_weight_norm", False, "remove weight normalization"),
    ("kernel", "identity", "multi-layer MLP -> single linear layer"),
    ("per_token_lr", False, "remove per-token learning rates"),
    ("use_momentum", False, "remove momentum"),
    ("use_muon", False, "remove gradient orthogonalization"),
)

ETA_RANGE = (0.05, 0.5)
ALPHA_RANGE = (0.0, 0.95)


def variant_config(vid: int, d_k: int = 4, d_h: int = 8, d_v: int = 4, chunk_len: int = 2, **extra) -> FastWeightConfig:
    """Config for ladder rung ``vid`` (0 = LaCT-style baseline, 6 = linear attention)."""
    if not isinstance(vid, (int, np.integer)) or not 0 <= vid <= 6:
        raise BadVariant(f"variant id must be an integer in 0..6, got {vid!r}")
    fields = dict(
        d_k=d_k,
        d_h=d_h,
        d_v=d_v,
        chunk_len=chunk_len,
        update_gate_weights=True,
        use_weight_norm=True,
        use_momentum=True,
        use_muon=True,
        per_token_lr=True,
        kernel="swiglu",
    )
    for name, value, _ in LADDER[:vid]:
        fields[name] = value
    if fields["kernel"] == "identity":
        fields["d_h"] = d_k
    fields.update(extra)
    return FastWeightConfig(**fields)


def ladder_toggles(a: FastWeightConfig, b: FastWeightConfig) -> list:
    """Names of ladder fields that differ between two configs."""
    return [name for name, _, _ in LADDER if getattr(a, name) != getattr(b, name)]


def make_schedule(
    config: FastWeightConfig,
    n_chunks: int,
    rng: np.random.Generator,
    momentum: Union[float, str] = "random",
) -> UpdateSchedule:
    """Learning rates drawn per chunk (or pinned to 1), momentum per ``momentum``.

    ``momentum`` is a constant alpha or "random" for per-chunk draws; it is
    ignored (alpha = 0) when the config has momentum off.
    """
    base_etas = rng.uniform(*ETA_RANGE, size=n_chunks)
    if momentum == "random":
        base_alphas = rng.uniform(*ALPHA_RANGE, size=n_chunks)
    else:
        base_alphas = np.full(n_chunks, float(momentum))
    etas = base_etas if config.per_token_lr else np.ones(n_chunks)
    alphas = base_alphas if config.use_momentum else np.zeros(n_chunks)
    return UpdateSchedule(tuple(etas), tuple(alphas))


@dataclass
class VariantRun:
    vid: int
    config: FastWeightConfig
    schedule: UpdateSchedule
    chunks: list
    state0: object
    outputs: list


def run_variant(vid: int, seed: int, dims=(4, 8, 4), n_chunks: int = 4, chunk_len: int = 2,
                momentum: Union[float, str] = "random") -> VariantRun:
    """Run rung ``vid`` on inputs that depend only on (seed, dims, n_chunks, chunk_len)."""
    d_k, d_h, d_v = dims
    config = variant_config(vid, d_k=d_k, d_h=d_h, d_v=d_v, chunk_len=chunk_len)
    data_rng = make_rng(seed)
    chunks = random_chunks(data_rng, n_chunks, chunk_len, d_k, d_v)
    schedule = make_schedule(config, n_chunks, make_rng(seed + 1_000_003), momentum)
    state0 = init_state(config, make_rng(seed + 2_000_003))
    outputs, _ = recurrent_forward(chunks, state0, schedule, config, record=False)
    return VariantRun(vid, config, schedule, chunks, state0, outputs)


def parallel_check(run: VariantRun, partitions: int = 1) -> dict:
    """Recurrent-vs-parallel agreement for one rung; records UnsupportedConfig instead of raising."""
    config = run.config
    result = {"eligible": parallel_eligible(config, "scan"), "bilinear": None, "scan": None, "error": None}
    if not result["eligible"]:
        try:
            ParallelPlan.from_config(config, run.schedule, "scan")
        except UnsupportedConfig as exc:
            result["error"] = f"UnsupportedConfig: {exc}"
        return result
    s = run.state0
    scan_plan = ParallelPlan.from_config(config, run.schedule, "scan", partitions=partitions)
    out = parallel_forward_scan(run.chunks, s.W1, s.W0, s.W2, scan_plan)
    result["scan"] = max_abs_diff_list(run.outputs, out)
    if parallel_eligible(config, "bilinear"):
        plan = ParallelPlan.from_config(config, run.schedule, "bilinear", partitions=partitions)
        out = parallel_forward_bilinear(run.chunks, s.W1, s.W0, s.W2, plan)
        result["bilinear"] = max_abs_diff_list(run.outputs, out)
    return result


@dataclass
class ReductionRow:
    from_id: int
    to_id: int
    toggle: str
    step_deltas: list
    max_delta: float
    parallel: Optional[dict] = None


@dataclass
class ReductionReport:
    seed: int
    dims: tuple
    n_chunks: int
    chunk_len: int
    rows: list = field(default_factory=list)
    variant6_vs_attention: float = 0.0
    parallel: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def parallel_ok(self, tol: float = 1e-8) -> bool:
        for vid in range(2, 7):
            p = self.parallel[vid]
            errs = [e for e in (p["scan"], p["bilinear"]) if e is not None]
            if not errs or max(errs) >= tol:
                return False
        return all(self.parallel[v]["error"] for v in (0, 1))

    def to_table(self) -> str:
        lines = [
            f"reduction ladder  seed={self.seed} dims={tuple(self.dims)} N={self.n_chunks} L={self.chunk_len}",
            f"{'step':<8}{'toggle':<50}{'max |delta|':>14}",
        ]
        for r in self.rows:
            lines.append(f"{r.from_id}->{r.to_id:<5}{r.toggle:<50}{r.max_delta:>14.6e}")
        lines.append("")
        lines.append(f"{'variant':<8}{'scan vs recurrent':>20}{'bilinear vs recurrent':>24}  note")
        for vid in range(7):
            p = self.parallel[vid]
            scan = "-" if p["scan"] is None else f"{p['scan']:.3e}"
            bil = "-" if p["bilinear"] is None else f"{p['bilinear']:.3e}"
            note = p["error"] or ""
            lines.append(f"{vid:<8}{scan:>20}{bil:>24}  {note}")
        lines.append(f"variant 6 vs standalone linear attention: {self.variant6_vs_attention:.3e}")
        return "\n".join(lines)


def reduction_report(seed: int, dims=(4, 8, 4), n_chunks: int = 4, chunk_len: int = 2,
                     momentum: Union[float, str] = "random") -> ReductionReport:
    """Run all seven rungs on identical inputs and compare neighbours."""
    runs = [run_variant(v, seed, dims, n_chunks, chunk_len, momentum) for v in range(7)]
    report = ReductionReport(seed=seed, dims=tuple(dims), n_chunks=n_chunks, chunk_len=chunk_len)
    for a, b in zip(runs, runs[1:]):
        deltas = [max_abs_diff(x, y) for x, y in zip(a.outputs, b.outputs)]
        name, _, desc = LADDER[a.vid]
        report.rows.append(
            ReductionRow(a.vid, b.vid, f"{name}: {desc}", deltas, max(deltas, default=0.0))
        )
    for run in runs:
        report.parallel[run.vid] = parallel_check(run)
    v6 = runs[6]
    report.variant6_vs_attention = max_abs_diff_list(
        v6.outputs, variant6_attention(v6.chunks, v6.state0.W1)
    )
    return report
