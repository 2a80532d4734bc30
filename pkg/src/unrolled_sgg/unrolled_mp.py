"""Unrolled message passing over scene graphs.

Three layer variants share the learned attention
``H_ij = w_a . [y_i; y_j; u_ij]``:

* ``gmp_baseline``:        ``Y' = relu(Y + A~ Y)``
* ``unrolled``:            ``Y' = relu((Y + A~ Y + Y0) / 3)``
* ``unrolled_reweighted``: as ``unrolled`` but ``A~ = softmax(Omega * H)``

``Omega`` is recomputed from the current node features at each layer and
treated as a constant for differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Node
from .graph_denoise import ParameterError, omega_matrix

VARIANTS = ("gmp_baseline", "unrolled", "unrolled_reweighted")


@dataclass
class UmpConfig:
    num_layers: int = 5
    variant: str = "unrolled_reweighted"
    epsilon: float = 0.5
    p: float = 0.1
    feature_dim: int = 64

    def __post_init__(self):
        if self.num_layers < 1:
            raise ParameterError("num_layers must be >= 1")
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown U-MP variant {self.variant!r}; choose from {VARIANTS}")
        if not self.epsilon > 0 or not 0 < self.p <= 2:
            raise ParameterError(f"need epsilon > 0 and 0 < p <= 2, got {self.epsilon}, {self.p}")


@dataclass
class UmpParams:
    """Trainable U-MP blocks as tape nodes.

    ``w_a`` is ``3d x 1``, ``W_t`` is ``O x d``, ``W_in`` is ``d x d_raw``.
    """

    w_a: Node
    W_t: Node
    W_in: Node


@dataclass
class AttentionState:
    A_tilde: Node
    Omega: np.ndarray
    Y: Node


def attention_mask(n: int, scene_of=None) -> np.ndarray:
    """Allowed attention edges: ordered pairs ``i != j`` within one scene.

    A node with no neighbour attends to itself only, which makes the
    unrolled update collapse to ``(2Y + Y0) / 3``.
    """
    if scene_of is None:
        same = np.ones((n, n), dtype=bool)
    else:
        scene_of = np.asarray(scene_of)
        same = scene_of[:, None] == scene_of[None, :]
    mask = same & ~np.eye(n, dtype=bool)
    lonely = ~mask.any(axis=1)
    mask[lonely, lonely] = True
    return mask


def union_projection(U: np.ndarray, w_a: Node, d: int) -> Node:
    """``u_ij . w_a[2d:3d]`` as an ``n x n`` node; constant across layers."""
    U = np.asarray(U, dtype=np.float64)
    n = U.shape[0]
    if U.shape != (n, n, d):
        raise DimensionError(f"union features {U.shape}, expected ({n}, {n}, {d})")
    w_u = ad.gather_rows(w_a, np.arange(2 * d, 3 * d))
    flat = w_a.tape.const(U.reshape(n * n, d))
    return ad.reshape(flat @ w_u, n, n)


def attention_scores(Y: Node, U, w_a: Node, union_term: Node | None = None) -> Node:
    """Raw scores ``H_ij``; the diagonal is excluded later through the softmax mask."""
    n, d = Y.shape
    if w_a.shape != (3 * d, 1):
        raise DimensionError(f"w_a {w_a.shape}, expected ({3 * d}, 1)")
    tape = Y.tape
    if union_term is None:
        union_term = union_projection(U, w_a, d)
    s_i = Y @ ad.gather_rows(w_a, np.arange(0, d))
    s_j = Y @ ad.gather_rows(w_a, np.arange(d, 2 * d))
    ones_row = tape.const(np.ones((1, n)))
    ones_col = tape.const(np.ones((n, 1)))
    return s_i @ ones_row + ones_col @ ad.transpose(s_j) + union_term


def ump_layer(
    Y_k: Node,
    Y_0: Node,
    U,
    params: UmpParams,
    config: UmpConfig,
    mask: np.ndarray | None = None,
    union_term: Node | None = None,
    omega: np.ndarray | None = None,
) -> AttentionState:
    """One layer; ``omega`` overrides the reweighting computed from ``Y_k``.

    The override exists for gradient checks: finite differences of a loss
    with every layer's ``omega`` pinned reproduce what the tape computes.
    """
    if Y_k.shape != Y_0.shape:
        raise DimensionError(f"Y_k {Y_k.shape} vs Y_0 {Y_0.shape}")
    n = Y_k.shape[0]
    tape = Y_k.tape
    if mask is None:
        mask = attention_mask(n)
    scores = attention_scores(Y_k, U, params.w_a, union_term)
    if config.variant == "unrolled_reweighted":
        if omega is None:
            omega = omega_matrix(Y_k.value, config.epsilon, config.p)
        scores = scores * tape.const(omega)
    else:
        omega = np.ones((n, n))
    A_tilde = ad.row_softmax(scores, mask)
    message = A_tilde @ Y_k
    if config.variant == "gmp_baseline":
        Y_next = ad.relu(Y_k + message)
    else:
        Y_next = ad.relu(ad.scale(Y_k + message + Y_0, 1.0 / 3.0))
    return AttentionState(A_tilde, omega, Y_next)


def project_inputs(X_raw, W_in: Node) -> Node:
    X = X_raw if isinstance(X_raw, Node) else W_in.tape.const(X_raw)
    if X.shape[1] != W_in.shape[1]:
        raise DimensionError(f"raw features {X.shape} vs projection {W_in.shape}")
    return X @ ad.transpose(W_in)


def run_ump(
    X_raw, U, params: UmpParams, config: UmpConfig, scene_of=None, return_states: bool = False, omegas=None
):
    """Project raw node inputs and apply ``config.num_layers`` U-MP layers.

    The projected inputs serve both as the first iterate and as the
    skip-connection anchor of every layer. ``omegas`` optionally pins the
    reweighting matrix of each layer.
    """
    Y0 = project_inputs(X_raw, params.W_in)
    n, d = Y0.shape
    mask = attention_mask(n, scene_of)
    union_term = union_projection(U, params.w_a, d)
    Y = Y0
    states = []
    for k in range(config.num_layers):
        state = ump_layer(Y, Y0, U, params, config, mask, union_term, None if omegas is None else omegas[k])
        states.append(state)
        Y = state.Y
    return (Y, states) if return_states else Y


def classify_nodes(Y_hat: Node, W_t: Node) -> Node:
    if Y_hat.shape[1] != W_t.shape[1]:
        raise DimensionError(f"node features {Y_hat.shape} vs classifier {W_t.shape}")
    return ad.row_softmax(Y_hat @ ad.transpose(W_t))


def node_logits(Y_hat: Node, W_t: Node) -> Node:
    return Y_hat @ ad.transpose(W_t)
