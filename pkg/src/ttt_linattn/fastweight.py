"""Sequential TTT inner loop for the SwiGLU fast-weight layer.

Fast weights multiply row-vector inputs on the left: ``x @ W0`` with
``W0`` of shape (d_k, d_h), ``W1`` of shape (d_h, d_v). The inner loss is the
negative Frobenius inner product ``-<f(K), V>``, so the upstream gradient is
simply ``-V``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import jsonschema
import numpy as np

from .errors import ScheduleLengthMismatch, ShapeMismatch, ZeroGradient
from .numerics import (
    as_mat,
    check_matmul,
    check_same_shape,
    ns_orthogonalize,
    row_l2_normalize,
    silu,
    silu_prime,
)

KERNELS = ("swiglu", "identity")
W1_INITS = ("zero", "gaussian")

CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "FastWeightConfig",
    "type": "object",
    "properties": {
        "d_k": {"type": "integer", "minimum": 1},
        "d_v": {"type": "integer", "minimum": 1},
        "d_h": {"type": "integer", "minimum": 1},
        "chunk_len": {"type": "integer", "minimum": 1},
        "update_gate_weights": {"type": "boolean"},
        "use_weight_norm": {"type": "boolean"},
        "use_muon": {"type": "boolean"},
        "use_momentum": {"type": "boolean"},
        "grad_sign": {"enum": [1, -1]},
        "replace_q_with_k": {"type": "boolean"},
        "w1_init": {"enum": list(W1_INITS)},
        "w1_scale": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "kernel": {"enum": list(KERNELS)},
        "per_token_lr": {"type": "boolean"},
    },
    "required": ["d_k", "d_v", "d_h"],
    "additionalProperties": False,
}


@dataclass(frozen=True)
class FastWeightConfig:
    d_k: int
    d_v: int
    d_h: int
    chunk_len: int = 1
    update_gate_weights: bool = True
    use_weight_norm: bool = False
    use_muon: bool = False
    use_momentum: bool = False
    grad_sign: int = 1
    replace_q_with_k: bool = False
    w1_init: str = "gaussian"
    # std of the Gaussian W1 init; None means 1/sqrt(d_h)
    w1_scale: Optional[float] = None
    # "identity" drops the SwiGLU kernel: phi(x) = x, requires d_h == d_k
    kernel: str = "swiglu"
    # False pins every chunk's learning rate to 1
    per_token_lr: bool = True

    def __post_init__(self):
        for name in ("d_k", "d_v", "d_h", "chunk_len"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"FastWeightConfig.{name} must be >= 1")
        if self.grad_sign not in (1, -1):
            raise ValueError("FastWeightConfig.grad_sign must be +1 or -1")
        if self.w1_init not in W1_INITS:
            raise ValueError(f"FastWeightConfig.w1_init must be one of {W1_INITS}")
        if self.kernel not in KERNELS:
            raise ValueError(f"FastWeightConfig.kernel must be one of {KERNELS}")
        if self.kernel == "identity":
            if self.d_h != self.d_k:
                raise ValueError("identity kernel requires d_h == d_k")
            if self.update_gate_weights:
                raise ValueError("identity kernel has no gate weights to update")

    @property
    def static_kernel(self) -> bool:
        return not self.update_gate_weights

    def replace(self, **changes) -> "FastWeightConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kwargs)

    @classmethod
    def from_dict(cls, data: dict) -> "FastWeightConfig":
        jsonschema.validate(data, CONFIG_SCHEMA)
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "FastWeightConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "FastWeightConfig":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class FastWeightState:
    """Fast weights plus momentum buffers. W0/W2 are None for the identity kernel."""

    W0: Optional[np.ndarray]
    W2: Optional[np.ndarray]
    W1: np.ndarray
    mom_W0: Optional[np.ndarray] = None
    mom_W2: Optional[np.ndarray] = None
    mom_W1: Optional[np.ndarray] = None

    def __post_init__(self):
        # momentum buffers start at zero (Delta W_{-1} = 0)
        for w, m in (("W0", "mom_W0"), ("W2", "mom_W2"), ("W1", "mom_W1")):
            if getattr(self, w) is not None and getattr(self, m) is None:
                object.__setattr__(self, m, np.zeros_like(getattr(self, w)))

    def replace(self, **changes) -> "FastWeightState":
        return dataclasses.replace(self, **changes)


class Grads(NamedTuple):
    dW0: Optional[np.ndarray]
    dW1: np.ndarray
    dW2: Optional[np.ndarray]


class Chunk(NamedTuple):
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray


@dataclass(frozen=True)
class UpdateSchedule:
    etas: tuple
    alphas: tuple

    def __post_init__(self):
        etas = tuple(float(e) for e in self.etas)
        alphas = tuple(float(a) for a in self.alphas)
        if len(etas) != len(alphas):
            raise ScheduleLengthMismatch(
                f"etas has {len(etas)} entries, alphas has {len(alphas)}"
            )
        if any(e < 0 for e in etas):
            raise ValueError("learning rates must be >= 0")
        if any(not 0.0 <= a <= 1.0 for a in alphas):
            raise ValueError("momentum factors must lie in [0, 1]")
        object.__setattr__(self, "etas", etas)
        object.__setattr__(self, "alphas", alphas)

    def __len__(self):
        return len(self.etas)

    @classmethod
    def constant(cls, n: int, eta: float = 1.0, alpha: float = 0.0) -> "UpdateSchedule":
        return cls((eta,) * n, (alpha,) * n)


@dataclass
class Trajectory:
    """Per-step record of a sequential run.

    ``phi_k[t]`` is phi_t(K_t), ``phi_q_next[t]`` is phi_{t+1}(X_t) for the
    read-out input X_t, ``value_term[t]`` is ``grad_sign * V_t`` (the
    eta-free negative loss gradient w.r.t. f).
    """

    W0: list = field(default_factory=list)
    W2: list = field(default_factory=list)
    W1: list = field(default_factory=list)
    W1_next: list = field(default_factory=list)
    phi_k: list = field(default_factory=list)
    phi_q_next: list = field(default_factory=list)
    value_term: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    config: Optional[FastWeightConfig] = None
    final_state: Optional[FastWeightState] = None

    def __len__(self):
        return len(self.outputs)

    def to_arrays(self) -> dict:
        arrays = {}
        for name in ("W0", "W2", "W1", "W1_next", "phi_k", "phi_q_next", "value_term", "outputs"):
            items = getattr(self, name)
            if items and items[0] is not None:
                arrays[name] = np.stack(items)
        return arrays

    def dump(self, path) -> None:
        """Write to ``.npz`` (flat binary) or ``.json`` depending on the suffix."""
        path = Path(path)
        arrays = self.to_arrays()
        if path.suffix == ".json":
            doc = {
                "config": self.config.to_dict() if self.config else None,
                "steps": len(self),
                "arrays": {k: v.tolist() for k, v in arrays.items()},
            }
            path.write_text(json.dumps(doc, sort_keys=True))
        else:
            meta = np.array(self.config.to_json() if self.config else "")
            np.savez(path, config=meta, **arrays)


def swiglu_phi(X, W0, W2) -> np.ndarray:
    """silu(X W0) * (X W2); with W0 = W2 = None the kernel is the identity."""
    X = as_mat(X, "X")
    if W0 is None and W2 is None:
        return X
    check_matmul(X, W0, "swiglu_phi X@W0")
    check_matmul(X, W2, "swiglu_phi X@W2")
    check_same_shape(W0, W2, "swiglu_phi W0/W2")
    return silu(X @ W0) * (X @ W2)


def swiglu_forward(X, state: FastWeightState) -> np.ndarray:
    phi = swiglu_phi(X, state.W0, state.W2)
    check_matmul(phi, state.W1, "swiglu_forward phi@W1")
    return phi @ state.W1


def kv_binding_loss(F, V) -> float:
    """Negative Frobenius inner product -<F, V>."""
    F = np.asarray(F)
    V = np.asarray(V)
    check_same_shape(F, V, "kv_binding_loss")
    return -float(np.sum(F * V))


def grads_chunk(state: FastWeightState, K, V, config: FastWeightConfig) -> Grads:
    """Analytic gradients of ``kv_binding_loss(swiglu_forward(K), V)``.

    The grad_sign flip happens in ``apply_update``, not here.
    """
    K = as_mat(K, "K")
    V = as_mat(V, "V")
    if K.shape[0] != V.shape[0]:
        raise ShapeMismatch(f"grads_chunk: K has {K.shape[0]} rows, V has {V.shape[0]}")
    if V.shape[1] != state.W1.shape[1]:
        raise ShapeMismatch(f"grads_chunk: V width {V.shape[1]} != W1 cols {state.W1.shape[1]}")
    U = -V
    phi = swiglu_phi(K, state.W0, state.W2)
    dW1 = phi.T @ U
    if not config.update_gate_weights or state.W0 is None:
        zero = None if state.W0 is None else np.zeros_like(state.W0)
        return Grads(zero, dW1, None if state.W2 is None else np.zeros_like(state.W2))
    h0 = K @ state.W0
    h2 = K @ state.W2
    dphi = U @ state.W1.T
    dW0 = K.T @ (dphi * h2 * silu_prime(h0))
    dW2 = K.T @ (dphi * silu(h0))
    return Grads(dW0, dW1, dW2)


def _step_one(W, mom, dW, eta, alpha, config):
    buf = dW * float(config.grad_sign)
    if config.use_momentum:
        buf = buf + alpha * mom
    step = buf
    if config.use_muon:
        try:
            step = ns_orthogonalize(buf)
        except ZeroGradient:
            # exactly-zero buffer: nothing to orthogonalize, skip the step
            step = None
    if step is not None:
        W = W - eta * step
    if config.use_weight_norm:
        W = row_l2_normalize(W)
    return W, buf


def apply_update(
    state: FastWeightState, grads: Grads, eta: float, alpha: float, config: FastWeightConfig
) -> FastWeightState:
    """One inner-loop optimizer step on every dynamic weight."""
    if eta < 0:
        raise ValueError("apply_update: learning rate must be >= 0")
    W1, mom1 = _step_one(state.W1, state.mom_W1, grads.dW1, eta, alpha, config)
    changes = {"W1": W1, "mom_W1": mom1}
    if config.update_gate_weights and state.W0 is not None:
        changes["W0"], changes["mom_W0"] = _step_one(
            state.W0, state.mom_W0, grads.dW0, eta, alpha, config
        )
        changes["W2"], changes["mom_W2"] = _step_one(
            state.W2, state.mom_W2, grads.dW2, eta, alpha, config
        )
    return state.replace(**changes)


def check_chunks(chunks: Sequence[Chunk], config: FastWeightConfig) -> list:
    out = []
    for t, ch in enumerate(chunks):
        q, k, v = (as_mat(x, f"chunk {t}") for x in ch)
        L = config.chunk_len
        if q.shape != (L, config.d_k) or k.shape != (L, config.d_k):
            raise ShapeMismatch(
                f"chunk {t}: q/k shapes {q.shape}/{k.shape}, expected {(L, config.d_k)}"
            )
        if v.shape != (L, config.d_v):
            raise ShapeMismatch(f"chunk {t}: v shape {v.shape}, expected {(L, config.d_v)}")
        out.append(Chunk(q, k, v))
    return out


def check_state(state: FastWeightState, config: FastWeightConfig) -> None:
    if state.W1.shape != (config.d_h, config.d_v):
        raise ShapeMismatch(f"W1 shape {state.W1.shape}, expected {(config.d_h, config.d_v)}")
    if config.kernel == "swiglu":
        for name in ("W0", "W2"):
            w = getattr(state, name)
            if w is None or w.shape != (config.d_k, config.d_h):
                got = None if w is None else w.shape
                raise ShapeMismatch(f"{name} shape {got}, expected {(config.d_k, config.d_h)}")


def recurrent_forward(
    chunks: Sequence[Chunk],
    state0: FastWeightState,
    schedule: UpdateSchedule,
    config: FastWeightConfig,
    record: bool = True,
):
    """Run the inner loop chunk by chunk: update on K_t, V_t, then read out.

    Returns ``(outputs, trajectory)``; the post-run weights sit on
    ``trajectory.final_state``. With ``record=False`` the trajectory holds
    only outputs and the final state.
    """
    chunks = check_chunks(chunks, config)
    check_state(state0, config)
    if len(schedule) != len(chunks):
        raise ScheduleLengthMismatch(
            f"schedule has {len(schedule)} steps for {len(chunks)} chunks"
        )
    traj = Trajectory(config=config)
    state = state0
    for t, (q, k, v) in enumerate(chunks):
        x = k if config.replace_q_with_k else q
        if record:
            traj.W0.append(state.W0)
            traj.W2.append(state.W2)
            traj.W1.append(state.W1)
            traj.phi_k.append(swiglu_phi(k, state.W0, state.W2))
            traj.value_term.append(v * float(config.grad_sign))
        grads = grads_chunk(state, k, v, config)
        state = apply_update(state, grads, schedule.etas[t], schedule.alphas[t], config)
        phi_q = swiglu_phi(x, state.W0, state.W2)
        out = phi_q @ state.W1
        if record:
            traj.W1_next.append(state.W1)
            traj.phi_q_next.append(phi_q)
        traj.outputs.append(out)
    traj.final_state = state
    return list(traj.outputs), traj


def init_state(config: FastWeightConfig, rng: np.random.Generator) -> FastWeightState:
    """W0, W2 ~ N(0, 1/sqrt(d_k)); W1 zero or N(0, w1_scale)."""
    W0 = W2 = None
    if config.kernel == "swiglu":
        std = 1.0 / np.sqrt(config.d_k)
        W0 = rng.normal(0.0, std, size=(config.d_k, config.d_h))
        W2 = rng.normal(0.0, std, size=(config.d_k, config.d_h))
    if config.w1_init == "zero":
        W1 = np.zeros((config.d_h, config.d_v))
    else:
        scale = config.w1_scale if config.w1_scale is not None else 1.0 / np.sqrt(config.d_h)
        W1 = rng.normal(0.0, scale, size=(config.d_h, config.d_v))
    return FastWeightState(W0=W0, W2=W2, W1=W1)


def random_chunks(
    rng: np.random.Generator, n_chunks: int, chunk_len: int, d_k: int, d_v: int, scale: float = 1.0
) -> list:
    out = []
    for _ in range(n_chunks):
        q = rng.normal(0.0, scale, size=(chunk_len, d_k))
        k = rng.normal(0.0, scale, size=(chunk_len, d_k))
        v = rng.normal(0.0, scale, size=(chunk_len, d_v))
        out.append(Chunk(q, k, v))
    return out


def split_chunks(Q, K, V, chunk_len: int) -> list:
    """Cut full-sequence Q, K, V into chunks. Ragged tails are an error, never padded."""
    Q, K, V = as_mat(Q, "Q"), as_mat(K, "K"), as_mat(V, "V")
    T = Q.shape[0]
    if K.shape[0] != T or V.shape[0] != T:
        raise ShapeMismatch("split_chunks: Q, K, V must have the same number of rows")
    if T % chunk_len:
        raise ShapeMismatch(f"sequence length {T} is not divisible by chunk_len {chunk_len}")
    return [
        Chunk(Q[s : s + chunk_len], K[s : s + chunk_len], V[s : s + chunk_len])
        for s in range(0, T, chunk_len)
    ]


def stack_chunks(chunks: Sequence[Chunk]):
    """Inverse of ``split_chunks``: concatenated (Q, K, V)."""
    if not chunks:
        raise ShapeMismatch("stack_chunks: empty chunk list")
    return tuple(np.concatenate([c[i] for c in chunks], axis=0) for i in range(3))
