"""Graph Laplacian denoising: objectives, direct solve, unrolled solvers.

The edge set is every ordered pair ``i != j``; an affinity matrix ``A``
(nonnegative, zero diagonal) gives soft edge membership, so the
regularizer ``sum_{i != j} A_ij * penalty(||y_i - y_j||)`` counts each
unordered pair twice when ``A`` is symmetric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DimensionError


class ParameterError(ValueError):
    """A numeric hyperparameter is outside its valid range."""


class SingularMatrixError(ArithmeticError):
    def __init__(self, pivot_index: int):
        super().__init__(f"matrix is singular at pivot {pivot_index}")
        self.pivot_index = pivot_index


def _check_eps_p(epsilon: float, p: float):
    if not epsilon > 0:
        raise ParameterError(f"epsilon must be > 0, got {epsilon}")
    if not 0 < p <= 2:
        raise ParameterError(f"p must lie in (0, 2], got {p}")


@dataclass
class GldProblem:
    X: np.ndarray
    A: np.ndarray
    epsilon: float = 0.5
    p: float = 0.1

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.A = np.asarray(self.A, dtype=np.float64)
        _check_eps_p(self.epsilon, self.p)
        n = self.X.shape[0]
        if self.A.shape != (n, n):
            raise DimensionError(f"affinity {self.A.shape} does not match {n} nodes")
        if (self.A < 0).any():
            raise ParameterError("affinity entries must be nonnegative")
        if np.any(np.diag(self.A) != 0):
            raise ParameterError("affinity diagonal must be zero")


@dataclass
class LaplacianForm:
    variant: str
    L: np.ndarray
    D: np.ndarray
    A: np.ndarray  # affinity the Laplacian was built from (row-normalized for random_walk)

    @classmethod
    def build(cls, A: np.ndarray, variant: str = "combinatorial") -> "LaplacianForm":
        A = np.asarray(A, dtype=np.float64)
        n = A.shape[0]
        deg = A.sum(axis=1)
        D = np.diag(deg)
        if variant == "combinatorial":
            return cls(variant, D - A, D, A)
        if variant == "random_walk":
            A_tilde = normalize_rows(A)
            return cls(variant, np.eye(n) - A_tilde, D, A_tilde)
        raise ParameterError(f"unknown Laplacian variant {variant!r}")


def normalize_rows(A: np.ndarray) -> np.ndarray:
    """``D^-1 A``; an isolated node (zero row) gets the identity row."""
    A = np.asarray(A, dtype=np.float64)
    deg = A.sum(axis=1)
    out = np.zeros_like(A)
    live = deg > 0
    out[live] = A[live] / deg[live, None]
    dead = np.flatnonzero(~live)
    out[dead, dead] = 1.0
    return out


# ---------------------------------------------------------------------------
# smoothed lp penalty


def smoothed_lp(x, epsilon: float, p: float):
    """Quadratic within ``epsilon`` of zero, ``|x|**p`` growth beyond it.

    Works elementwise on arrays; C1-continuous at ``|x| == epsilon``.
    """
    _check_eps_p(epsilon, p)
    ax = np.abs(np.asarray(x, dtype=np.float64))
    inner = epsilon ** (p - 2) * ax**2
    with np.errstate(divide="ignore"):
        outer = (2.0 / p) * ax**p - ((2.0 - p) / p) * epsilon**p
    out = np.where(ax <= epsilon, inner, outer)
    return float(out) if out.ndim == 0 else out


def smoothed_lp_derivative(x, epsilon: float, p: float):
    """Derivative in ``|x|``: ``2 eps^(p-2)|x|`` inside, ``2|x|^(p-1)`` outside."""
    _check_eps_p(epsilon, p)
    ax = np.abs(np.asarray(x, dtype=np.float64))
    with np.errstate(divide="ignore"):
        out = np.where(ax <= epsilon, 2 * epsilon ** (p - 2) * ax, 2 * ax ** (p - 1))
    return float(out) if out.ndim == 0 else out


def pairwise_distances(Y: np.ndarray) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.float64)
    diff = Y[:, None, :] - Y[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


def omega_matrix(Y: np.ndarray, epsilon: float, p: float) -> np.ndarray:
    """MM reweighting ``eps^(p-2)`` for close pairs, ``dist^(p-2)`` otherwise."""
    _check_eps_p(epsilon, p)
    dist = pairwise_distances(Y)
    close = dist <= epsilon
    np.fill_diagonal(close, True)
    safe = np.where(close, 1.0, dist)
    return np.where(close, epsilon ** (p - 2), safe ** (p - 2))


# ---------------------------------------------------------------------------
# objectives


def _check_same_shape(Y, X):
    if Y.shape != X.shape:
        raise DimensionError(f"Y {Y.shape} vs X {X.shape}")


def gld_objective(Y, problem: GldProblem, laplacian: LaplacianForm | None = None) -> float:
    """Fidelity plus quadratic smoothness over all ordered pairs."""
    Y = np.asarray(Y, dtype=np.float64)
    _check_same_shape(Y, problem.X)
    A = problem.A if laplacian is None else laplacian.A
    A = A - np.diag(np.diag(A))
    d2 = pairwise_distances(Y) ** 2
    return float(((Y - problem.X) ** 2).sum() + (A * d2).sum())


def gld_lp_objective(Y, problem: GldProblem, laplacian: LaplacianForm | None = None) -> float:
    Y = np.asarray(Y, dtype=np.float64)
    _check_same_shape(Y, problem.X)
    A = problem.A if laplacian is None else laplacian.A
    A = A - np.diag(np.diag(A))
    pen = smoothed_lp(pairwise_distances(Y), problem.epsilon, problem.p)
    return float(((Y - problem.X) ** 2).sum() + (A * pen).sum())


def mm_surrogate(Y, Y_anchor, problem: GldProblem, laplacian: LaplacianForm | None = None) -> float:
    """Quadratic upper bound of the lp objective, weights frozen at ``Y_anchor``."""
    Y = np.asarray(Y, dtype=np.float64)
    _check_same_shape(Y, problem.X)
    _check_same_shape(np.asarray(Y_anchor), problem.X)
    A = problem.A if laplacian is None else laplacian.A
    A = A - np.diag(np.diag(A))
    W = A * omega_matrix(Y_anchor, problem.epsilon, problem.p)
    d2 = pairwise_distances(Y) ** 2
    return float(((Y - problem.X) ** 2).sum() + (W * d2).sum())


# ---------------------------------------------------------------------------
# solvers


def lu_factor(M: np.ndarray):
    """Doolittle LU with partial pivoting: returns packed LU and row permutation."""
    LU = np.array(M, dtype=np.float64)
    n = LU.shape[0]
    if LU.shape != (n, n):
        raise DimensionError(f"LU needs a square matrix, got {LU.shape}")
    perm = np.arange(n)
    tol = np.finfo(float).eps * max(1.0, np.abs(LU).max(initial=0.0)) * n
    for k in range(n):
        piv = k + int(np.argmax(np.abs(LU[k:, k])))
        if abs(LU[piv, k]) <= tol:
            raise SingularMatrixError(k)
        if piv != k:
            LU[[k, piv]] = LU[[piv, k]]
            perm[[k, piv]] = perm[[piv, k]]
        LU[k + 1 :, k] /= LU[k, k]
        LU[k + 1 :, k + 1 :] -= np.outer(LU[k + 1 :, k], LU[k, k + 1 :])
    return LU, perm


def lu_solve(LU: np.ndarray, perm: np.ndarray, B: np.ndarray) -> np.ndarray:
    B = np.asarray(B, dtype=np.float64)
    vec = B.ndim == 1
    Y = B[perm].reshape(len(perm), -1).copy()
    n = LU.shape[0]
    for i in range(n):
        Y[i] -= LU[i, :i] @ Y[:i]
    for i in reversed(range(n)):
        Y[i] = (Y[i] - LU[i, i + 1 :] @ Y[i + 1 :]) / LU[i, i]
    return Y.ravel() if vec else Y


def closed_form_solution(problem: GldProblem, laplacian: LaplacianForm) -> np.ndarray:
    """Solve ``(I + L) Y = X``."""
    n = problem.X.shape[0]
    LU, perm = lu_factor(np.eye(n) + laplacian.L)
    return lu_solve(LU, perm, problem.X)


def gradient_step(Y_k, Y_0, laplacian: LaplacianForm, alpha: float) -> np.ndarray:
    Y_k = np.asarray(Y_k, dtype=np.float64)
    Y_0 = np.asarray(Y_0, dtype=np.float64)
    _check_same_shape(Y_k, Y_0)
    if laplacian.L.shape[0] != Y_k.shape[0]:
        raise DimensionError(f"Laplacian {laplacian.L.shape} vs signals {Y_k.shape}")
    if not alpha > 0:
        raise ParameterError("alpha must be positive")
    return Y_k - 2 * alpha * ((laplacian.L + np.eye(len(Y_k))) @ Y_k - Y_0)


def unrolled_step(Y_k, Y_0, A_tilde, nonneg: bool = False) -> np.ndarray:
    """``(1/3)(A~ Y + Y + Y0)``, optionally projected onto the nonnegative orthant."""
    out = (A_tilde @ Y_k + Y_k + Y_0) / 3.0
    return np.maximum(out, 0.0) if nonneg else out


def quadratic_weights(problem: GldProblem, Y_anchor) -> np.ndarray:
    A = problem.A - np.diag(np.diag(problem.A))
    return A * omega_matrix(Y_anchor, problem.epsilon, problem.p)


def surrogate_minimizer(problem: GldProblem, W: np.ndarray) -> np.ndarray:
    """Exact minimizer of ``||Y - X||^2 + sum_ij W_ij ||y_i - y_j||^2``."""
    S = (W + W.T) / 2
    L = np.diag(S.sum(axis=1)) - S
    LU, perm = lu_factor(np.eye(len(S)) + 2 * L)
    return lu_solve(LU, perm, problem.X)


def surrogate_gradient_steps(problem: GldProblem, W: np.ndarray, Y, steps: int = 1) -> np.ndarray:
    """Gradient descent on the frozen-weight quadratic with step 1/Lipschitz."""
    S = (W + W.T) / 2
    L = np.diag(S.sum(axis=1)) - S
    H = np.eye(len(S)) + 2 * L  # gradient = 2 (H Y - X)
    lip = 2 * np.linalg.eigvalsh(H).max()
    Y = np.array(Y, dtype=np.float64)
    for _ in range(steps):
        Y = Y - (2 * (H @ Y - problem.X)) / lip
    return Y


def mm_solve(problem: GldProblem, iterations: int = 20, inner_steps: int | None = None, Y_init=None):
    """Majorization-minimization on the lp objective.

    Each outer iteration freezes the weights at the current iterate and
    either minimizes the quadratic exactly (``inner_steps=None``) or takes
    that many gradient steps on it. Returns the iterate trace.
    """
    Y = problem.X.copy() if Y_init is None else np.array(Y_init, dtype=np.float64)
    trace = [Y]
    for _ in range(iterations):
        W = quadratic_weights(problem, Y)
        if inner_steps is None:
            Y = surrogate_minimizer(problem, W)
        else:
            Y = surrogate_gradient_steps(problem, W, Y, inner_steps)
        trace.append(Y)
    return trace
