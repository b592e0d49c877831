"""Dense-matrix primitives shared by every other module.

Matrices are plain 2-D numpy arrays. The verification path is float64
throughout; float32 arrays pass through untouched so the benchmark can run
in single precision.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ShapeMismatch, ZeroGradient

# Muon quintic coefficients (Keller Jordan's constants).
NS_COEFFS = (3.4445, -4.7750, 2.0315)
NS_STEPS = 5
NS_POLISH_STEPS = 5
NS_EPS = 1e-7
NORM_EPS = 1e-12
FD_STEP = 1e-5


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator: numpy's PCG64, bit-reproducible across platforms."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_mat(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a finite 2-D float array.

    float32 and float64 inputs keep their dtype, everything else becomes
    float64.
    """
    a = np.asarray(x)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    if a.ndim != 2:
        raise ShapeMismatch(f"{name}: expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name}: contains NaN or Inf")
    return a


def check_matmul(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"{what}: cannot multiply {a.shape} by {b.shape}")


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what}: shapes {a.shape} and {b.shape} differ")


def sigmoid(x):
    # split by sign so exp never overflows
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x):
    """x * sigmoid(x), elementwise. Scalars in, scalars out."""
    if np.isscalar(x):
        return float(x * sigmoid(np.array([x]))[0])
    x = np.asarray(x)
    return x * sigmoid(x)


def silu_prime(x):
    """Derivative of silu: sigmoid(x) * (1 + x * (1 - sigmoid(x)))."""
    if np.isscalar(x):
        return float(silu_prime(np.array([x]))[0])
    x = np.asarray(x)
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def ns_orthogonalize(
    G,
    steps: int = NS_STEPS,
    polish_steps: int = NS_POLISH_STEPS,
    coeffs: tuple[float, float, float] = NS_COEFFS,
) -> np.ndarray:
    """Approximate the orthogonal polar factor U V^T of ``G``.

    Runs ``steps`` Muon quintic iterations after Frobenius pre-scaling, then
    ``polish_steps`` cubic Newton-Schulz iterations (1.5 X - 0.5 X X^T X).
    The quintic alone leaves singular values scattered in roughly
    [0.7, 1.15]; the cubic phase pulls them onto 1. ``polish_steps=0`` gives
    plain Muon.

    Odd symmetry holds exactly: ``ns_orthogonalize(-G) == -ns_orthogonalize(G)``.
    """
    G = as_mat(G, "G")
    norm = float(np.linalg.norm(G))
    if not norm > 1e-30:
        raise ZeroGradient("ns_orthogonalize: input has (near) zero Frobenius norm")
    a, b, c = coeffs
    tall = G.shape[0] > G.shape[1]
    X = G.T if tall else G
    X = X / (norm + NS_EPS)
    for _ in range(steps):
        A = X @ X.T
        X = a * X + (b * A + c * (A @ A)) @ X
    for _ in range(polish_steps):
        X = 1.5 * X - 0.5 * ((X @ X.T) @ X)
    return X.T if tall else X


def row_l2_normalize(W, eps: float = NORM_EPS) -> np.ndarray:
    """Divide every row by max(||row||_2, eps)."""
    W = as_mat(W, "W")
    norms = np.linalg.norm(W, axis=1, keepdims=True)
    return W / np.maximum(norms, eps)


def fd_grad(f: Callable[[np.ndarray], float], X, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function of a matrix."""
    if not h > 0:
        raise ValueError("fd_grad: step h must be positive")
    X = np.array(X, dtype=np.float64, copy=True)
    grad = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        orig = X[idx]
        X[idx] = orig + h
        fp = f(X.copy())
        X[idx] = orig - h
        fm = f(X.copy())
        X[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(analytic, numeric) -> float:
    """Max over entries of |a - g| / max(1, |a|, |g|)."""
    a = np.asarray(analytic, dtype=np.float64)
    g = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(g)))
    return float(np.max(np.abs(a - g) / denom))


def max_abs_diff(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"max_abs_diff: shapes {a.shape} and {b.shape} differ")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)))


def max_abs_diff_list(xs, ys) -> float:
    if len(xs) != len(ys):
        raise ShapeMismatch(f"max_abs_diff_list: lengths {len(xs)} and {len(ys)} differ")
    return max((max_abs_diff(x, y) for x, y in zip(xs, ys)), default=0.0)
