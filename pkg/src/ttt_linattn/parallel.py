"""Chunk-parallel evaluation of the static-kernel, unnormalized TTT layer.

Two routes to the same outputs:

* bilinear: O = Phi(Q) W1_0 + ((Phi(Q) Phi(K)^T) * mask) (sign * V), with a
  block-constant causal mask that carries learning rates and momentum;
* scan: an inclusive prefix scan over per-chunk affine updates of the
  (momentum buffer, accumulated state) pair.

Both assume W0/W2 never move and W1 is not normalized. Anything else is not
associative; ``demonstrate_non_associativity`` measures how far the sum form
drifts in those cases.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ShapeMismatch, UnsupportedConfig, ZeroGradient
from .fastweight import (
    FastWeightConfig,
    UpdateSchedule,
    check_chunks,
    init_state,
    random_chunks,
    recurrent_forward,
    swiglu_phi,
)
from .linear_form import cumulative_beta
from .numerics import as_mat, make_rng, max_abs_diff_list, ns_orthogonalize

STRATEGIES = ("bilinear", "scan")
THREADS_ENV = "TTT_LINATTN_THREADS"


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


@dataclass
class ParallelPlan:
    N: int
    L: int
    etas: tuple
    alphas: tuple
    strategy: str = "bilinear"
    grad_sign: int = 1
    # read chunk keys instead of queries at output time
    replace_q_with_k: bool = False
    # orthogonalize the momentum buffer before each step (scan only)
    buffer_orth: bool = False
    # number of work partitions; 1 is the deterministic single-partition mode
    partitions: int = 1
    threads: Optional[int] = None
    _mask: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.etas = tuple(float(e) for e in self.etas)
        self.alphas = tuple(float(a) for a in self.alphas)
        if self.N < 1 or self.L < 1:
            raise UnsupportedConfig("ParallelPlan: N and L must be >= 1")
        if len(self.etas) != self.N or len(self.alphas) != self.N:
            raise UnsupportedConfig("ParallelPlan: etas/alphas length must equal N")
        if self.strategy not in STRATEGIES:
            raise UnsupportedConfig(f"ParallelPlan: unknown strategy {self.strategy!r}")
        if self.partitions < 1:
            raise UnsupportedConfig("ParallelPlan: partitions must be >= 1")

    @property
    def momentum_mask(self) -> np.ndarray:
        if self._mask is None:
            self._mask = build_momentum_mask(self.alphas, self.N)
        return self._mask

    @property
    def lr_mask(self) -> np.ndarray:
        return build_lr_momentum_mask(self.etas, self.alphas, self.N)

    @classmethod
    def from_config(
        cls,
        config: FastWeightConfig,
        schedule: UpdateSchedule,
        strategy: str = "bilinear",
        **kwargs,
    ) -> "ParallelPlan":
        """Plan for ``config``; raises UnsupportedConfig when it is not associative."""
        check_parallel_eligible(config, strategy)
        alphas = schedule.alphas if config.use_momentum else (0.0,) * len(schedule)
        return cls(
            N=len(schedule),
            L=config.chunk_len,
            etas=schedule.etas,
            alphas=alphas,
            strategy=strategy,
            grad_sign=config.grad_sign,
            replace_q_with_k=config.replace_q_with_k,
            buffer_orth=config.use_muon,
            **kwargs,
        )


def check_parallel_eligible(config: FastWeightConfig, strategy: str = "scan") -> None:
    if config.update_gate_weights:
        raise UnsupportedConfig("dynamic kernel (W0/W2 updated) has no parallel form")
    if config.use_weight_norm:
        raise UnsupportedConfig("weight normalization has no parallel form")
    if strategy == "bilinear" and config.use_muon:
        raise UnsupportedConfig("bilinear form cannot express gradient orthogonalization")
    if strategy not in STRATEGIES:
        raise UnsupportedConfig(f"unknown strategy {strategy!r}")


def parallel_eligible(config: FastWeightConfig, strategy: str = "scan") -> bool:
    try:
        check_parallel_eligible(config, strategy)
    except UnsupportedConfig:
        return False
    return True


def build_momentum_mask(alphas: Sequence[float], N: int) -> np.ndarray:
    """C[t, i] = sum_{j=i}^{t} beta_i^j for t >= i, else 0."""
    if N < 1:
        raise ValueError("build_momentum_mask: N must be >= 1")
    return build_lr_momentum_mask((1.0,) * N, alphas, N)


def build_lr_momentum_mask(etas: Sequence[float], alphas: Sequence[float], N: int) -> np.ndarray:
    """C[t, i] = sum_{j=i}^{t} eta_j * beta_i^j for t >= i, else 0.

    Column i is built by the running recurrence u_i^t = u_i^{t-1} + eta_t beta_i^t.
    """
    C = np.zeros((N, N))
    for i in range(N):
        beta = 1.0
        acc = 0.0
        for t in range(i, N):
            if t > i:
                beta *= alphas[t]
            acc += etas[t] * beta
            C[t, i] = acc
    return C


def expand_mask(C, L: int) -> np.ndarray:
    """Kronecker product with an L x L block of ones."""
    if L < 1:
        raise ValueError("expand_mask: L must be >= 1")
    return np.kron(as_mat(C, "C"), np.ones((L, L)))


def _features(chunks, W0, W2, plan: ParallelPlan):
    phi_q = []
    phi_k = []
    for c in chunks:
        x = c.k if plan.replace_q_with_k else c.q
        phi_q.append(x)
        phi_k.append(c.k)
    Q = np.concatenate(phi_q, axis=0)
    K = np.concatenate(phi_k, axis=0)
    return swiglu_phi(Q, W0, W2), swiglu_phi(K, W0, W2)


def _check_inputs(chunks, W1_0, W0, W2, plan: ParallelPlan):
    W1_0 = as_mat(W1_0, "W1_0")
    if len(chunks) != plan.N:
        raise UnsupportedConfig(f"plan expects {plan.N} chunks, got {len(chunks)}")
    d_h, d_v = W1_0.shape
    d_k = chunks[0][0].shape[1]
    cfg = FastWeightConfig(
        d_k=d_k,
        d_v=d_v,
        d_h=d_h,
        chunk_len=plan.L,
        update_gate_weights=False,
        kernel="identity" if W0 is None else "swiglu",
    )
    return check_chunks(chunks, cfg), W1_0


def _partition(n: int, parts: int) -> list:
    parts = max(1, min(parts, n))
    bounds = np.linspace(0, n, parts + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _run_parts(fn: Callable, ranges: list, threads: Optional[int]):
    threads = threads or default_threads()
    if threads <= 1 or len(ranges) <= 1:
        return [fn(a, b) for a, b in ranges]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda r: fn(*r), ranges))


def parallel_forward_bilinear(chunks, W1_0, W0, W2, plan: ParallelPlan) -> list:
    """Masked-bilinear evaluation of every chunk output at once.

    Query chunk t only touches key chunks 0..t (the mask is zero above the
    block diagonal); query blocks are split over ``plan.partitions`` work
    items, which never changes the result.
    """
    if plan.buffer_orth:
        raise UnsupportedConfig("bilinear form cannot express gradient orthogonalization")
    chunks, W1_0 = _check_inputs(chunks, W1_0, W0, W2, plan)
    N, L = plan.N, plan.L
    PQ, PK = _features(chunks, W0, W2, plan)
    V = np.concatenate([c.v for c in chunks], axis=0) * float(plan.grad_sign)
    C = plan.lr_mask
    base = PQ @ W1_0
    out = np.empty_like(base)

    def work(t0, t1):
        for t in range(t0, t1):
            rows = slice(t * L, (t + 1) * L)
            cols = (t + 1) * L
            scores = PQ[rows] @ PK[:cols].T
            scores *= np.repeat(C[t, : t + 1], L)[None, :]
            out[rows] = base[rows] + scores @ V[:cols]

    _run_parts(work, _partition(N, plan.partitions), plan.threads)
    return [out[t * L : (t + 1) * L] for t in range(N)]


def parallel_forward_bilinear_dense(chunks, W1_0, W0, W2, plan: ParallelPlan) -> list:
    """The same formula with the full (NL) x (NL) mask materialized. Reference only."""
    chunks, W1_0 = _check_inputs(chunks, W1_0, W0, W2, plan)
    PQ, PK = _features(chunks, W0, W2, plan)
    V = np.concatenate([c.v for c in chunks], axis=0) * float(plan.grad_sign)
    M = expand_mask(plan.lr_mask, plan.L)
    O = PQ @ W1_0 + ((PQ @ PK.T) * M) @ V
    return [O[t * plan.L : (t + 1) * plan.L] for t in range(plan.N)]


class ScanElement(NamedTuple):
    """Affine map (P, S) -> (a P + P_seg, S + b P + S_seg) over a run of chunks.

    P is the momentum buffer, S the accumulated change of W1, ``a`` the
    product of momentum factors and ``b`` the learning-rate-weighted sum of
    momentum prefixes over the run.
    """

    P: np.ndarray
    S: np.ndarray
    a: float
    b: float


def scan_identity(shape) -> ScanElement:
    return ScanElement(np.zeros(shape), np.zeros(shape), 1.0, 0.0)


def scan_combine(left: ScanElement, right: ScanElement) -> ScanElement:
    """Compose ``left`` (earlier chunks) with ``right`` (later chunks)."""
    if left.P.shape != right.P.shape:
        raise ShapeMismatch(f"scan_combine: {left.P.shape} vs {right.P.shape}")
    return ScanElement(
        P=right.a * left.P + right.P,
        S=left.S + right.b * left.P + right.S,
        a=left.a * right.a,
        b=left.b + right.b * left.a,
    )


def scan_leaf(X: np.ndarray, eta: float, alpha: float) -> ScanElement:
    """Single chunk: P' = alpha P + X, S' = S + eta P'."""
    return ScanElement(P=X, S=eta * X, a=alpha, b=eta * alpha)


def inclusive_scan(elements: Sequence, combine: Callable, partitions: int = 1, threads=None) -> list:
    """Blocked inclusive scan.

    Each block is folded left to right independently, block totals are
    scanned, then every block is offset by the carry of the blocks before it.
    ``partitions=1`` is a plain sequential fold.
    """
    n = len(elements)
    if n == 0:
        return []
    ranges = _partition(n, partitions)

    def local(a, b):
        acc = [elements[a]]
        for i in range(a + 1, b):
            acc.append(combine(acc[-1], elements[i]))
        return acc

    blocks = _run_parts(local, ranges, threads)
    carries = [None]
    for blk in blocks[:-1]:
        carries.append(blk[-1] if carries[-1] is None else combine(carries[-1], blk[-1]))

    def offset(idx):
        carry = carries[idx]
        if carry is None:
            return blocks[idx]
        return [combine(carry, e) for e in blocks[idx]]

    out = []
    for blk in _run_parts(lambda i, _: offset(i), [(i, i + 1) for i in range(len(blocks))], threads):
        out.extend(blk)
    return out


def _add(x, y):
    return x + y


def _momentum_combine(left, right):
    # (a, P) pairs for P_t = alpha_t P_{t-1} + X_t
    return (left[0] * right[0], right[0] * left[1] + right[1])


def parallel_forward_scan(
    chunks,
    W1_0,
    W0,
    W2,
    plan: ParallelPlan,
    per_term_orth: bool = False,
) -> list:
    """Prefix-scan evaluation: O_t = Phi(Q_t) (W1_0 + S_t).

    ``per_term_orth`` orthogonalizes each chunk's outer product before it
    enters the recurrence. ``plan.buffer_orth`` instead orthogonalizes the
    scanned momentum buffer P_t, as the optimizer does; that needs two
    associative passes (scan P, map, prefix-sum S) around the nonlinear map.
    """
    if per_term_orth and plan.buffer_orth:
        raise UnsupportedConfig("choose either per-term or buffer orthogonalization")
    chunks, W1_0 = _check_inputs(chunks, W1_0, W0, W2, plan)
    N, L = plan.N, plan.L
    PQ, PK = _features(chunks, W0, W2, plan)
    sign = float(plan.grad_sign)
    X = []
    for t, c in enumerate(chunks):
        kv = PK[t * L : (t + 1) * L].T @ (c.v * sign)
        if per_term_orth:
            kv = _orth_or_zero(kv)
        X.append(kv)

    if plan.buffer_orth:
        pairs = [(plan.alphas[t], X[t]) for t in range(N)]
        P = [p for _, p in inclusive_scan(pairs, _momentum_combine, plan.partitions, plan.threads)]
        steps = [plan.etas[t] * _orth_or_zero(P[t]) for t in range(N)]
        S = inclusive_scan(steps, _add, plan.partitions, plan.threads)
    else:
        leaves = [scan_leaf(X[t], plan.etas[t], plan.alphas[t]) for t in range(N)]
        S = [e.S for e in inclusive_scan(leaves, scan_combine, plan.partitions, plan.threads)]
    return [PQ[t * L : (t + 1) * L] @ (W1_0 + S[t]) for t in range(N)]


def _orth_or_zero(M):
    try:
        return ns_orthogonalize(M)
    except ZeroGradient:
        return np.zeros_like(M)


def parallel_forward(chunks, state0, schedule, config: FastWeightConfig, strategy="bilinear", **kw):
    """Dispatch a fast-weight config to a parallel path (checks eligibility)."""
    plan = ParallelPlan.from_config(config, schedule, strategy, **kw)
    if strategy == "bilinear":
        return parallel_forward_bilinear(chunks, state0.W1, state0.W0, state0.W2, plan)
    return parallel_forward_scan(chunks, state0.W1, state0.W0, state0.W2, plan)


@dataclass
class NonAssocReport:
    seed: int
    config: FastWeightConfig
    recurrent: list
    sum_form: list
    gap: float
    reducible: bool


def demonstrate_non_associativity(
    config: FastWeightConfig,
    seed: int,
    n_chunks: int = 4,
    eta: float = 0.1,
    alpha: float = 0.0,
) -> NonAssocReport:
    """Recurrent run vs the static, unnormalized sum form on the same inputs.

    The sum form freezes phi at the initial W0/W2 and drops normalization,
    which is the only way to make the recurrence associative. For a
    reducible config the two agree to rounding; otherwise they drift apart.
    """
    rng = make_rng(seed)
    state0 = init_state(config, rng)
    chunks = random_chunks(rng, n_chunks, config.chunk_len, config.d_k, config.d_v)
    schedule = UpdateSchedule.constant(n_chunks, eta, alpha)
    rec, _ = recurrent_forward(chunks, state0, schedule, config, record=False)
    relaxed = config.replace(update_gate_weights=False, use_weight_norm=False)
    plan = ParallelPlan.from_config(relaxed, schedule, "scan")
    sum_form = parallel_forward_scan(chunks, state0.W1, state0.W0, state0.W2, plan)
    return NonAssocReport(
        seed=seed,
        config=config,
        recurrent=rec,
        sum_form=sum_form,
        gap=max_abs_diff_list(rec, sum_form),
        reducible=parallel_eligible(config, "scan"),
    )


def momentum_mask_column_check(alphas: Sequence[float], N: int) -> float:
    """Largest deviation of mask columns from running sums of cumulative_beta."""
    C = build_momentum_mask(alphas, N)
    worst = 0.0
    for i in range(N):
        acc = 0.0
        for t in range(i, N):
            acc += cumulative_beta(alphas, i, t)
            worst = max(worst, abs(C[t, i] - acc))
    return worst
