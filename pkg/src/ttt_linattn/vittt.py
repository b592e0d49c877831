"""ViTTT's two fast-weight components and their linear-attention forms.

GLU:  f(x) = silu(x W0) * (x W1), square weights, updated together.
Conv: per-channel 3x3 depthwise cross-correlation, zero padding, stride 1.

Both use the loss -<f(k), v>. The ``*_step_and_eval`` functions run the
gradient step, evaluate the updated component, and also evaluate the
closed form from pre-update snapshots; they raise if the two disagree.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EquivalenceError, ShapeMismatch
from .numerics import as_mat, check_matmul, silu, silu_prime

DEFAULT_ETA = 1.0
STEP_TOL = 1e-12


@dataclass(frozen=True)
class GluState:
    W0: np.ndarray
    W1: np.ndarray

    def __post_init__(self):
        W0 = as_mat(self.W0, "W0")
        W1 = as_mat(self.W1, "W1")
        if W0.shape[0] != W0.shape[1] or W0.shape != W1.shape:
            raise ShapeMismatch(f"GluState: W0 {W0.shape} and W1 {W1.shape} must be equal squares")


@dataclass(frozen=True)
class ConvState:
    W: np.ndarray  # (C, 3, 3)

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        if W.ndim != 3 or W.shape[1:] != (3, 3) or W.shape[0] < 1:
            raise ShapeMismatch(f"ConvState: kernel stack must be (C, 3, 3), got {W.shape}")
        if not np.all(np.isfinite(W)):
            raise ValueError("ConvState: kernel contains NaN or Inf")
        object.__setattr__(self, "W", W)

    @property
    def channels(self) -> int:
        return self.W.shape[0]


def _check_equiv(closed, direct, tol, what):
    gap = float(np.max(np.abs(closed - direct))) if closed.size else 0.0
    scale = max(1.0, float(np.max(np.abs(direct)))) if direct.size else 1.0
    if gap > tol * scale:
        raise EquivalenceError(f"{what}: closed form differs from updated network by {gap:.3e}")
    return gap


# ---------------------------------------------------------------- GLU

def glu_phi(x, W0) -> np.ndarray:
    return silu(as_mat(x, "x") @ W0)


def glu_forward(x, state: GluState) -> np.ndarray:
    """silu(x W0) * (x W1) for row vectors (or a stack of them)."""
    x = as_mat(np.atleast_2d(x), "x")
    check_matmul(x, state.W0, "glu_forward")
    return silu(x @ state.W0) * (x @ state.W1)


def glu_grads(state: GluState, k, v):
    """(dW0, dW1) of -<glu_forward(k), v>."""
    k = as_mat(np.atleast_2d(k), "k")
    v = as_mat(np.atleast_2d(v), "v")
    check_matmul(k, state.W0, "glu_grads")
    if v.shape != (k.shape[0], state.W1.shape[1]):
        raise ShapeMismatch(f"glu_grads: v shape {v.shape} does not match k {k.shape}")
    h0 = k @ state.W0
    dW1 = -(k.T @ (v * silu(h0)))
    dW0 = -(k.T @ ((v * (k @ state.W1)) * silu_prime(h0)))
    return dW0, dW1


@dataclass
class GluStep:
    output: np.ndarray  # closed form
    direct: np.ndarray  # updated GLU evaluated on q
    state: GluState  # post-update weights
    gap: float


def glu_step_and_eval(state: GluState, q, k, v, eta: float = DEFAULT_ETA, tol: float = STEP_TOL) -> GluStep:
    """One gradient step on (W0, W1), then read out q.

    Closed form: phi_{t+1}(q) * (q W1_t + eta (q k^T)(v * phi_t(k))).
    """
    if eta < 0:
        raise ValueError("glu_step_and_eval: eta must be >= 0")
    q = as_mat(np.atleast_2d(q), "q")
    k = as_mat(np.atleast_2d(k), "k")
    v = as_mat(np.atleast_2d(v), "v")
    dW0, dW1 = glu_grads(state, k, v)
    new = GluState(W0=state.W0 - eta * dW0, W1=state.W1 - eta * dW1)
    direct = glu_forward(q, new)
    gated_v = v * glu_phi(k, state.W0)
    closed = glu_phi(q, new.W0) * (q @ state.W1 + eta * ((q @ k.T) @ gated_v))
    gap = _check_equiv(closed, direct, tol, "glu_step_and_eval")
    return GluStep(output=closed, direct=direct, state=new, gap=gap)


@dataclass
class GluTrajectory:
    W1_0: np.ndarray
    etas: list = field(default_factory=list)
    keys: list = field(default_factory=list)
    gated_values: list = field(default_factory=list)  # v_i * phi_i(k_i)
    gates_q: list = field(default_factory=list)  # phi_{t+1}(q_t)
    queries: list = field(default_factory=list)
    outputs: list = field(default_factory=list)


def glu_recurrent(state: GluState, qs: Sequence, ks: Sequence, vs: Sequence, etas: Sequence[float]):
    """Token-by-token GLU inner loop. Returns (outputs, trajectory, final state)."""
    if not len(qs) == len(ks) == len(vs) == len(etas):
        raise ShapeMismatch("glu_recurrent: qs, ks, vs and etas must have equal length")
    traj = GluTrajectory(W1_0=state.W1)
    for q, k, v, eta in zip(qs, ks, vs, etas):
        q = as_mat(np.atleast_2d(q), "q")
        k = as_mat(np.atleast_2d(k), "k")
        v = as_mat(np.atleast_2d(v), "v")
        traj.gated_values.append(v * glu_phi(k, state.W0))
        dW0, dW1 = glu_grads(state, k, v)
        state = GluState(W0=state.W0 - eta * dW0, W1=state.W1 - eta * dW1)
        out = glu_forward(q, state)
        traj.etas.append(float(eta))
        traj.keys.append(k)
        traj.queries.append(q)
        traj.gates_q.append(glu_phi(q, state.W0))
        traj.outputs.append(out)
    return list(traj.outputs), traj, state


def glu_rebuild(traj: GluTrajectory) -> list:
    """o_t = phi_{t+1}(q_t) * (q_t (W1_0 + sum_{i<=t} eta_i k_i^T (v_i * phi_i(k_i))))."""
    S = traj.W1_0
    out = []
    for t in range(len(traj.outputs)):
        S = S + traj.etas[t] * (traj.keys[t].T @ traj.gated_values[t])
        out.append(traj.gates_q[t] * (traj.queries[t] @ S))
    return out


# ---------------------------------------------------------------- depthwise conv

def _as_map(X, name) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or min(X.shape) < 1:
        raise ShapeMismatch(f"{name}: expected a (C, H, W) map, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name}: contains NaN or Inf")
    return X


def _shifted(X: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """out[c, i, j] = X[c, i+dy, j+dx], zero outside the grid."""
    C, H, W = X.shape
    out = np.zeros_like(X)
    i0, i1 = max(0, -dy), min(H, H - dy)
    j0, j1 = max(0, -dx), min(W, W - dx)
    if i1 > i0 and j1 > j0:
        out[:, i0:i1, j0:j1] = X[:, i0 + dy : i1 + dy, j0 + dx : j1 + dx]
    return out


OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


def dwconv_forward(X, state: ConvState) -> np.ndarray:
    """O[c,i,j] = sum_{dy,dx} W[c, dy+1, dx+1] * X[c, i+dy, j+dx]."""
    X = _as_map(X, "X")
    if X.shape[0] != state.channels:
        raise ShapeMismatch(f"dwconv_forward: {X.shape[0]} channels vs kernel {state.channels}")
    out = np.zeros_like(X)
    for dy, dx in OFFSETS:
        out += state.W[:, dy + 1, dx + 1, None, None] * _shifted(X, dy, dx)
    return out


def dwconv_grad(K, V) -> np.ndarray:
    """Kernel gradient of -<conv(K; W), V>: -sum_{i,j} K[c, i+dy, j+dx] V[c, i, j]."""
    K = _as_map(K, "K")
    V = _as_map(V, "V")
    if K.shape != V.shape:
        raise ShapeMismatch(f"dwconv_grad: K {K.shape} vs V {V.shape}")
    g = np.zeros((K.shape[0], 3, 3))
    for dy, dx in OFFSETS:
        g[:, dy + 1, dx + 1] = -np.sum(_shifted(K, dy, dx) * V, axis=(1, 2))
    return g


def spatial_attention_weights(Q, K) -> np.ndarray:
    """A[c, p, p'] = sum_{dy,dx} Q[c, p+d] K[c, p'+d], positions flattened row-major."""
    Q = _as_map(Q, "Q")
    K = _as_map(K, "K")
    if Q.shape != K.shape:
        raise ShapeMismatch(f"spatial_attention_weights: Q {Q.shape} vs K {K.shape}")
    C = Q.shape[0]
    A = np.zeros((C, Q.shape[1] * Q.shape[2], K.shape[1] * K.shape[2]))
    for dy, dx in OFFSETS:
        qs = _shifted(Q, dy, dx).reshape(C, -1)
        ks = _shifted(K, dy, dx).reshape(C, -1)
        A += qs[:, :, None] * ks[:, None, :]
    return A


def spatial_attention_apply(A, V) -> np.ndarray:
    V = _as_map(V, "V")
    C, H, W = V.shape
    return np.einsum("cpq,cq->cp", A, V.reshape(C, -1)).reshape(C, H, W)


@dataclass
class ConvStep:
    output: np.ndarray  # closed form
    direct: np.ndarray
    state: ConvState
    gap: float


def dwconv_step_and_eval(state: ConvState, Q, K, V, eta: float = DEFAULT_ETA, tol: float = STEP_TOL) -> ConvStep:
    """Conv(Q; W - eta grad) against Conv(Q; W) + eta * A(Q, K) V."""
    if eta < 0:
        raise ValueError("dwconv_step_and_eval: eta must be >= 0")
    Q = _as_map(Q, "Q")
    new = ConvState(state.W - eta * dwconv_grad(K, V))
    direct = dwconv_forward(Q, new)
    closed = dwconv_forward(Q, state) + eta * spatial_attention_apply(spatial_attention_weights(Q, K), V)
    gap = _check_equiv(closed, direct, tol, "dwconv_step_and_eval")
    return ConvStep(output=closed, direct=direct, state=new, gap=gap)


def dwconv_recurrent(state: ConvState, Qs, Ks, Vs, etas):
    """Sequential kernel updates; output t reads Q_t through the updated kernel."""
    if not len(Qs) == len(Ks) == len(Vs) == len(etas):
        raise ShapeMismatch("dwconv_recurrent: Qs, Ks, Vs and etas must have equal length")
    outs = []
    for Q, K, V, eta in zip(Qs, Ks, Vs, etas):
        state = ConvState(state.W - eta * dwconv_grad(K, V))
        outs.append(dwconv_forward(Q, state))
    return outs, state


def dwconv_rebuild(state0: ConvState, Qs, Ks, Vs, etas) -> list:
    """O_t = Conv(Q_t; W_0) + sum_{i<=t} eta_i A(Q_t, K_i) V_i."""
    outs = []
    for t, Q in enumerate(Qs):
        o = dwconv_forward(Q, state0)
        for i in range(t + 1):
            o = o + etas[i] * spatial_attention_apply(spatial_attention_weights(Q, Ks[i]), Vs[i])
        outs.append(o)
    return outs
