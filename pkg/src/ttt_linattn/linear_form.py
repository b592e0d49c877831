"""Closed-form linear-attention readings of a recorded TTT run.

Every output O_t of the recurrent layer is rebuilt as

    q_hat_t @ (S0 + sum_{i<=t} T_i),     T_i = k_hat_i^T v_hat_i

from trajectory snapshots only: the effective query phi_{t+1}(Q_t), the
effective keys phi_i(K_i) and values derived from V_i and the schedule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import IncompatibleMode, IndexOrder, ShapeMismatch, ZeroGradient
from .fastweight import FastWeightConfig, Trajectory, UpdateSchedule
from .numerics import as_mat, check_matmul, ns_orthogonalize

MODES = ("theorem1", "theorem2", "theorem3", "lact")


def cumulative_beta(alphas: Sequence[float], i: int, j: int) -> float:
    """prod_{s=i+1}^{j} alpha_s, which is 1 when i == j."""
    if i > j:
        raise IndexOrder(f"cumulative_beta: i={i} > j={j}")
    if i < 0 or j >= len(alphas):
        raise IndexOrder(f"cumulative_beta: ({i}, {j}) outside 0..{len(alphas) - 1}")
    out = 1.0
    for s in range(i + 1, j + 1):
        out *= alphas[s]
    return out


def momentum_weight(alphas: Sequence[float], i: int, t: int) -> float:
    """sum_{j=i}^{t} beta_i^j."""
    if i > t:
        raise IndexOrder(f"momentum_weight: i={i} > t={t}")
    total = 0.0
    beta = 1.0
    for j in range(i, t + 1):
        if j > i:
            beta *= alphas[j]
        total += beta
    return total


def lr_momentum_weight(etas: Sequence[float], alphas: Sequence[float], i: int, t: int) -> float:
    """sum_{j=i}^{t} eta_j * beta_i^j: the total step size gradient i receives by step t.

    Collapses to ``etas[i] * momentum_weight(alphas, i, t)`` when the
    learning rate is constant over [i, t], and to ``etas[i]`` when every
    alpha after i is zero.
    """
    if i > t:
        raise IndexOrder(f"lr_momentum_weight: i={i} > t={t}")
    total = 0.0
    beta = 1.0
    for j in range(i, t + 1):
        if j > i:
            beta *= alphas[j]
        total += etas[j] * beta
    return total


@dataclass
class EffectiveTerm:
    """One key/value contribution. ``scale`` multiplies the (possibly orthogonalized) outer product."""

    k_hat: np.ndarray
    v_hat: np.ndarray
    step_index: int
    scale: float = 1.0

    def outer(self, orth: bool) -> np.ndarray:
        kv = self.k_hat.T @ self.v_hat
        if orth:
            try:
                kv = ns_orthogonalize(kv)
            except ZeroGradient:
                return np.zeros_like(kv)
        return kv if self.scale == 1.0 else self.scale * kv


@dataclass
class LinearState:
    S0: np.ndarray
    terms: list = field(default_factory=list)
    per_term_orth: bool = False

    def __post_init__(self):
        idx = [t.step_index for t in self.terms]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise IndexOrder("LinearState: term step indices must be strictly increasing")

    def total(self) -> np.ndarray:
        S = self.S0
        for term in self.terms:
            S = S + term.outer(self.per_term_orth)
        return S


def effective_terms_from_trajectory(
    traj: Trajectory,
    schedule: UpdateSchedule,
    config: FastWeightConfig,
    t: int,
    per_term_orth: bool | None = None,
) -> LinearState:
    """Linear state whose read-out by phi_{t+1}(Q_t) reproduces O_t.

    Without orthogonalization the step sizes are folded into ``v_hat``;
    with it they stay outside the orthogonalizer as ``scale`` (positive
    scalars inside it would cancel).
    """
    if not 0 <= t < len(traj):
        raise IndexOrder(f"query step {t} outside trajectory of length {len(traj)}")
    if per_term_orth is None:
        per_term_orth = config.use_muon
    etas, alphas = schedule.etas, schedule.alphas
    terms = []
    for i in range(t + 1):
        if config.use_momentum:
            c = lr_momentum_weight(etas, alphas, i, t)
        else:
            c = etas[i]
        vt = traj.value_term[i]
        if per_term_orth:
            terms.append(EffectiveTerm(traj.phi_k[i], vt, i, scale=c))
        else:
            terms.append(EffectiveTerm(traj.phi_k[i], vt * c, i))
    return LinearState(S0=traj.W1[0], terms=terms, per_term_orth=per_term_orth)


def linear_eval(state: LinearState, q_hat) -> np.ndarray:
    """q_hat @ (S0 + sum_i T_i)."""
    q_hat = as_mat(q_hat, "q_hat")
    S = state.total()
    check_matmul(q_hat, S, "linear_eval")
    return q_hat @ S


def check_mode(config: FastWeightConfig, mode: str) -> None:
    if mode not in MODES:
        raise IncompatibleMode(f"unknown reconstruction mode {mode!r}; expected one of {MODES}")
    if config.use_weight_norm:
        raise IncompatibleMode(f"{mode}: weight normalization has no closed sum form")
    if mode in ("theorem1", "theorem2") and (config.use_momentum or config.use_muon):
        raise IncompatibleMode(f"{mode}: requires momentum and orthogonalization off")
    if mode == "theorem3" and config.use_muon:
        raise IncompatibleMode("theorem3: requires orthogonalization off")
    if mode == "lact" and config.use_muon and config.use_momentum:
        raise IncompatibleMode(
            "lact: per-term orthogonalization only matches the optimizer with momentum off"
        )


def rebuild_outputs(
    traj: Trajectory,
    schedule: UpdateSchedule,
    config: FastWeightConfig,
    mode: str,
    strict: bool = True,
) -> list:
    """Reconstruct every recorded output from its linear-attention form.

    ``theorem1`` linearizes each step on its own (S0 = W1_t snapshot);
    the other modes unroll from W1_0 and never look at later weights.
    ``strict=False`` skips the mode preconditions so callers can measure
    how far an invalid sum form drifts.
    """
    if strict:
        check_mode(config, mode)
    elif mode not in MODES:
        raise IncompatibleMode(f"unknown reconstruction mode {mode!r}")
    if len(traj.phi_k) != len(traj):
        raise IncompatibleMode("trajectory was recorded with record=False")
    per_term_orth = config.use_muon and mode == "lact"
    out = []
    for t in range(len(traj)):
        if mode == "theorem1":
            term = EffectiveTerm(traj.phi_k[t], traj.value_term[t] * schedule.etas[t], t)
            state = LinearState(S0=traj.W1[t], terms=[term])
        else:
            state = effective_terms_from_trajectory(traj, schedule, config, t, per_term_orth)
        out.append(linear_eval(state, traj.phi_q_next[t]))
    return out


def variant6_attention(chunks, W) -> list:
    """Chunk-causal linear attention O_t = Q_t (W + sum_{i<=t} K_i^T V_i)."""
    W = as_mat(W, "W")
    S = W
    out = []
    for t, ch in enumerate(chunks):
        q, k, v = (as_mat(x, f"chunk {t}") for x in ch[:3])
        if q.shape[1] != W.shape[0] or k.shape[1] != W.shape[0] or v.shape[1] != W.shape[1]:
            raise ShapeMismatch(
                f"variant6_attention chunk {t}: q {q.shape}, k {k.shape}, v {v.shape} vs W {W.shape}"
            )
        if k.shape[0] != v.shape[0]:
            raise ShapeMismatch(f"variant6_attention chunk {t}: k/v row counts differ")
        S = S + k.T @ v
        out.append(q @ S)
    return out


def reconstruction_report(traj: Trajectory, schedule: UpdateSchedule, config: FastWeightConfig,
                          mode: str, strict: bool = True) -> list:
    """Per-step {step, max_abs, rel} records comparing rebuilt to recorded outputs."""
    rebuilt = rebuild_outputs(traj, schedule, config, mode, strict=strict)
    rows = []
    for t, (got, ref) in enumerate(zip(rebuilt, traj.outputs)):
        err = float(np.max(np.abs(got - ref))) if ref.size else 0.0
        mag = float(np.max(np.abs(ref))) if ref.size else 0.0
        rows.append({"step": t, "mode": mode, "max_abs": err, "rel": err / max(1.0, mag)})
    return rows
