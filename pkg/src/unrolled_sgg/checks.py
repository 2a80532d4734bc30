"""Numerical self-checks: gradients, the denoising solvers, majorization and l2,1.

Every check compares against an independent route (finite differences,
numpy's dense solver, direct formula evaluation) and reports the largest
error it observed next to its tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .diversity import l21_norm
from .graph_denoise import (
    GldProblem,
    LaplacianForm,
    closed_form_solution,
    gld_lp_objective,
    gradient_step,
    mm_solve,
    mm_surrogate,
    smoothed_lp,
    unrolled_step,
)

SUITES = ("grad", "gld", "mm", "l21")
GRAD_FLOOR = 1e-6


@dataclass
class CheckResult:
    suite: str
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error)) and self.max_error <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.suite}/{self.name}: max error {self.max_error:.3e} (tolerance {self.tolerance:.1e})"


def _random_affinity(rng, n, symmetric=False):
    A = rng.uniform(0, 1, size=(n, n))
    if symmetric:
        A = (A + A.T) / 2
    np.fill_diagonal(A, 0.0)
    return A


# ---------------------------------------------------------------------------
# gradients


def _op_cases():
    """(name, builder over leaves, input shapes, keep inputs away from kinks)."""
    mask = np.array([[0, 1, 1], [1, 0, 1], [1, 1, 0], [1, 0, 0]], dtype=bool)
    return [
        ("matmul", lambda a, b: ad.sum_all(a @ b), [(3, 4), (4, 2)], False),
        ("add_broadcast", lambda a, b: ad.sum_all((a + b) * (a + b)), [(3, 2), (1, 2)], False),
        ("sub", lambda a, b: ad.sum_all((a - b) * a), [(3, 2), (3, 2)], False),
        ("hadamard", lambda a, b: ad.sum_all(a * b * a), [(2, 3), (2, 3)], False),
        ("scale_transpose", lambda a: ad.sum_all(ad.scale(ad.transpose(a), -1.7) @ a), [(3, 2)], False),
        ("relu", lambda a: ad.sum_all(ad.relu(a) * a), [(3, 3)], True),
        ("sqrt", lambda a: ad.sum_all(ad.sqrt(a * a + a * a)), [(2, 3)], True),
        ("column_sums", lambda a: ad.sum_all(ad.column_sums(a) * ad.column_sums(a)), [(4, 2)], False),
        ("gather_rows", lambda a: ad.sum_all(ad.gather_rows(a, [2, 0, 2]) * ad.gather_rows(a, [1, 1, 0])), [(3, 2)], False),
        ("pick", lambda a: ad.sum_all(ad.pick(a * a, [1, 0, 2])), [(3, 3)], False),
        ("reshape", lambda a: ad.sum_all(ad.reshape(a, 2, 3) @ ad.reshape(a, 3, 2)), [(1, 6)], False),
        ("concat_cols", lambda a, b: ad.sum_all(ad.concat_cols([a, b, a]) * ad.concat_cols([b, a, b])), [(2, 2), (2, 2)], False),
        ("softmax_masked", lambda a: ad.sum_all(ad.row_softmax(a, mask) * a), [(4, 3)], False),
        ("log_softmax", lambda a: ad.sum_all(ad.pick(ad.row_log_softmax(a), [0, 2, 1])), [(3, 3)], False),
    ]


def op_gradient_error(build, shapes, rng, avoid_kinks=False, h=1e-5) -> float:
    values = [rng.uniform(-2, 2, size=s) for s in shapes]
    if avoid_kinks:
        for v in values:
            v[np.abs(v) < 1e-2] = 0.5
    tape = ad.Tape()
    leaves = [tape.leaf(v) for v in values]
    tape.backward(build(*leaves))
    worst = 0.0
    for k, leaf in enumerate(leaves):

        def f(x, k=k):
            t = ad.Tape()
            return float(build(*[t.leaf(x if i == k else values[i]) for i in range(len(values))]).value[0, 0])

        worst = max(worst, ad.max_relative_error(leaf.grad, ad.numeric_gradient(f, values[k], h), GRAD_FLOOR))
    return worst


def toy_training_problem(seed: int = 0, p: float = 0.1):
    """A 3-node scene with 4 scored pairs and every loss term active."""
    from .pipeline import TrainConfig, init_params
    from .synth_scene import SynthConfig, generate
    from .unrolled_mp import UmpConfig

    data = generate(
        SynthConfig(num_object_cats=3, num_rel_cats=3, feature_dim=4, min_nodes=3, max_nodes=3,
                    cats_per_scene=2, num_train=1, num_val=0, num_test=0, relation_rate=0.5, seed=seed)
    )
    config = TrainConfig(tau=0.1, grouping="batch", min_group_size=1, seed=seed, ump=UmpConfig(feature_dim=4, num_layers=2, p=p))
    params = init_params(data, config)
    rng = np.random.default_rng(seed)
    # larger random weights than the init so every ReLU and the fusion are exercised
    for k in params.arrays:
        params.arrays[k] = params.arrays[k] + 0.3 * rng.standard_normal(params.arrays[k].shape)
    pairs = [[(0, 1), (1, 0), (0, 2), (2, 1)]]
    return params, data.train, pairs, config


def model_gradient_errors(seed: int = 0, p: float = 0.1, h: float = 1e-5) -> dict:
    """Max relative error per parameter block of the full training loss.

    The reweighting matrices are a stop-gradient inside the network, so the
    finite differences run with them pinned at their unperturbed values.
    At ``p = 2`` they are identically one and pinning changes nothing.
    """
    from .pipeline import PARAM_NAMES, batch_loss, layer_omegas

    params, scenes, pairs, config = toy_training_problem(seed, p)
    omegas = layer_omegas(params, scenes, config)
    tape, leaves, loss = batch_loss(params, scenes, pairs, config)
    tape.backward(loss)
    errors = {}
    for name in PARAM_NAMES:

        def f(x, name=name):
            trial = params.copy()
            trial.arrays[name] = x
            return float(batch_loss(trial, scenes, pairs, config, omegas=omegas)[2].value[0, 0])

        num = ad.numeric_gradient(f, params.arrays[name], h)
        errors[name] = ad.max_relative_error(leaves[name].grad, num, GRAD_FLOOR)
    return errors


def grad_suite(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    out = [CheckResult("grad", f"op_{name}", op_gradient_error(build, shapes, rng, kinks), 1e-6)
           for name, build, shapes, kinks in _op_cases()]
    for p in (0.1, 2.0):
        for name, err in model_gradient_errors(seed, p).items():
            out.append(CheckResult("grad", f"model_p{p:g}_{name}", err, 1e-4))
    return out


# ---------------------------------------------------------------------------
# denoising solvers


def unrolled_convergence_error(instances: int = 50, iterations: int = 60, seed: int = 0) -> float:
    """Largest ``|Y_K - Y*|_F / |X|_F`` of the fixed-attention iteration against a dense solve."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n, d = int(rng.integers(2, 21)), int(rng.integers(1, 9))
        X = rng.normal(size=(n, d))
        A = _random_affinity(rng, n)
        A_tilde = A / A.sum(axis=1, keepdims=True)
        Y_star = np.linalg.solve(2 * np.eye(n) - A_tilde, X)
        Y = X.copy()
        for _ in range(iterations):
            Y = unrolled_step(Y, X, A_tilde)
        worst = max(worst, np.linalg.norm(Y - Y_star) / np.linalg.norm(X))
    return worst


def step_identity_error(instances: int = 100, seed: int = 0) -> float:
    """Gradient step with random-walk Laplacian and step 1/6 against the unrolled update."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n, d = int(rng.integers(2, 21)), int(rng.integers(1, 9))
        X, Y = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        lap = LaplacianForm.build(_random_affinity(rng, n, symmetric=True), "random_walk")
        worst = max(worst, float(np.abs(gradient_step(Y, X, lap, 1 / 6) - unrolled_step(Y, X, lap.A)).max()))
    return worst


def closed_form_error(instances: int = 20, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n, d = int(rng.integers(2, 21)), int(rng.integers(1, 9))
        X = rng.normal(size=(n, d))
        for variant in ("combinatorial", "random_walk"):
            prob = GldProblem(X, _random_affinity(rng, n))
            lap = LaplacianForm.build(prob.A, variant)
            Y = closed_form_solution(prob, lap)
            oracle = np.linalg.solve(np.eye(n) + lap.L, X)
            worst = max(worst, float(np.abs(Y - oracle).max()))
    return worst


SMOOTH_GRID = [(eps, p) for eps in (0.1, 0.5, 1.0) for p in (0.1, 0.3, 1.0, 2.0)]


def smoothed_lp_errors() -> tuple[float, float]:
    """(branch mismatch at |x| = eps over the grid, deviation from x^2 at p = 2)."""
    worst = 0.0
    for eps, p in SMOOTH_GRID:
        inner_v, outer_v = eps ** (p - 2) * eps**2, (2 / p) * eps**p - ((2 - p) / p) * eps**p
        inner_d, outer_d = 2 * eps ** (p - 2) * eps, 2 * eps ** (p - 1)
        worst = max(worst, abs(inner_v - outer_v), abs(inner_d - outer_d))
        worst = max(worst, abs(float(smoothed_lp(eps, eps, p)) - outer_v))
    xs = np.linspace(-5, 5, 1001)
    quad = max(float(np.abs(smoothed_lp(xs, eps, 2.0) - xs**2).max()) for eps in (0.1, 0.5, 1.0))
    return worst, quad


def gld_suite(seed: int = 0) -> list:
    branch, quad = smoothed_lp_errors()
    return [
        CheckResult("gld", "closed_form_vs_dense_solve", closed_form_error(seed=seed), 1e-10),
        CheckResult("gld", "unrolled_iteration_to_closed_form", unrolled_convergence_error(seed=seed), 1e-9),
        CheckResult("gld", "gradient_step_identity", step_identity_error(seed=seed), 1e-12),
        CheckResult("gld", "smoothed_lp_branches", branch, 1e-10),
        CheckResult("gld", "smoothed_lp_p2_is_square", quad, 0.0),
    ]


# ---------------------------------------------------------------------------
# majorization


def _anchored_gap(Y, Ya, prob) -> float:
    return (mm_surrogate(Y, Ya, prob) - mm_surrogate(Ya, Ya, prob)) - (gld_lp_objective(Y, prob) - gld_lp_objective(Ya, prob))


def _random_mm_instance(rng):
    n, d = int(rng.integers(2, 8)), int(rng.integers(1, 5))
    p = float(rng.choice([0.1, 0.3, 1.0, 2.0]))
    prob = GldProblem(rng.normal(size=(n, d)), _random_affinity(rng, n), epsilon=float(rng.choice([0.1, 0.5, 1.0])), p=p)
    Ya = rng.normal(size=(n, d)) * float(rng.choice([0.1, 1.0, 3.0]))
    return prob, Ya


def majorization_errors(pairs: int = 1000, seed: int = 0) -> tuple[float, float]:
    """(largest negative anchored gap, largest gap magnitude at the anchor)."""
    rng = np.random.default_rng(seed)
    violation = at_anchor = 0.0
    for _ in range(pairs):
        prob, Ya = _random_mm_instance(rng)
        Y = Ya + rng.normal(size=Ya.shape) * float(rng.choice([0.01, 0.3, 2.0]))
        violation = max(violation, -_anchored_gap(Y, Ya, prob))
        at_anchor = max(at_anchor, abs(_anchored_gap(Ya, Ya, prob)))
    return violation, at_anchor


def tangency_error(instances: int = 50, seed: int = 0) -> float:
    """Finite-difference gradient of the anchored gap at the anchor, relative to the objective's."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        prob, Ya = _random_mm_instance(rng)
        g = ad.numeric_gradient(lambda Y: _anchored_gap(Y, Ya, prob), Ya, 1e-6)
        f = ad.numeric_gradient(lambda Y: gld_lp_objective(Y, prob), Ya, 1e-6)
        worst = max(worst, float(np.abs(g).max() / max(1.0, np.abs(f).max())))
    return worst


def mm_monotonicity_error(instances: int = 20, iterations: int = 15, seed: int = 0) -> float:
    """Largest increase of the robust objective along MM iterates."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(instances):
        n = int(rng.integers(3, 12))
        prob = GldProblem(rng.normal(size=(n, 3)), _random_affinity(rng, n), epsilon=0.5, p=float(rng.choice([0.1, 0.5, 1.0])))
        inner = None if k % 2 == 0 else 3
        values = [gld_lp_objective(Y, prob) for Y in mm_solve(prob, iterations, inner_steps=inner)]
        worst = max(worst, float(np.max(np.diff(values), initial=0.0)))
    return worst


def mm_suite(seed: int = 0) -> list:
    violation, at_anchor = majorization_errors(seed=seed)
    return [
        CheckResult("mm", "anchored_gap_nonnegative", violation, 1e-10),
        CheckResult("mm", "gap_zero_at_anchor", at_anchor, 1e-12),
        CheckResult("mm", "gap_tangent_at_anchor", tangency_error(seed=seed), 1e-6),
        CheckResult("mm", "objective_nonincreasing", mm_monotonicity_error(seed=seed), 1e-10),
    ]


# ---------------------------------------------------------------------------
# l2,1


L21_SIZES = [(4, 2), (8, 4), (12, 3)]


def l21_extremal_error() -> float:
    worst = 0.0
    for N, R in L21_SIZES:
        concentrated = np.zeros((N, R))
        concentrated[:, 0] = 1.0
        uniform = np.full((N, R), 1.0 / R)
        balanced = np.eye(R)[np.arange(N) % R]
        worst = max(
            worst,
            abs(l21_norm(concentrated) - math.sqrt(N)),
            abs(l21_norm(uniform) - math.sqrt(N)),
            abs(l21_norm(balanced) - math.sqrt(N * R)),
        )
    return worst


def l21_bound_violation(samples: int = 1000, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        N, R = int(rng.integers(1, 30)), int(rng.integers(1, 12))
        P = rng.exponential(size=(N, R)) ** rng.uniform(0.2, 4.0)
        P /= P.sum(axis=1, keepdims=True)
        v = l21_norm(P)
        worst = max(worst, math.sqrt(N / R) - v, v - math.sqrt(N * R))
    return worst


def l21_suite(seed: int = 0) -> list:
    return [
        CheckResult("l21", "extremal_values", l21_extremal_error(), 1e-10),
        CheckResult("l21", "row_stochastic_bounds", max(l21_bound_violation(seed=seed), 0.0), 1e-12),
    ]


RUNNERS = {"grad": grad_suite, "gld": gld_suite, "mm": mm_suite, "l21": l21_suite}


def run_suites(name: str = "all", seed: int = 0) -> list:
    names = SUITES if name == "all" else (name,)
    unknown = [n for n in names if n not in RUNNERS]
    if unknown:
        raise ValueError(f"unknown check suite {unknown[0]!r}; choose from {SUITES + ('all',)}")
    results = []
    for n in names:
        results.extend(RUNNERS[n](seed))
    return results
