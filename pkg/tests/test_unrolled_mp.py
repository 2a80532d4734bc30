import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from unrolled_sgg import autodiff as ad
from unrolled_sgg.autodiff import DimensionError
from unrolled_sgg.graph_denoise import LaplacianForm, ParameterError, gradient_step, omega_matrix
from unrolled_sgg.unrolled_mp import (
    UmpConfig,
    UmpParams,
    attention_mask,
    attention_scores,
    classify_nodes,
    run_ump,
    ump_layer,
)


def make_params(tape, rng, d, d_raw=None, O=4, w_a=None):
    d_raw = d if d_raw is None else d_raw
    w = rng.normal(size=(3 * d, 1)) if w_a is None else w_a
    return UmpParams(
        w_a=tape.leaf(w),
        W_t=tape.leaf(rng.normal(size=(O, d))),
        W_in=tape.leaf(np.eye(d) if d_raw == d else rng.normal(size=(d, d_raw))),
    )


def sym_union(rng, n, d):
    U = rng.normal(size=(n, n, d))
    return (U + U.transpose(1, 0, 2)) / 2


def layer_oracle(Y, Y0, U, w_a, variant, eps=0.5, p=0.1):
    """Scalar-loop re-implementation of one layer."""
    n, d = Y.shape
    H = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            H[i, j] = sum(w_a[k] * v for k, v in enumerate(np.concatenate([Y[i], Y[j], U[i, j]])))
    if variant == "unrolled_reweighted":
        for i in range(n):
            for j in range(n):
                r = math.sqrt(sum((Y[i, c] - Y[j, c]) ** 2 for c in range(d)))
                H[i, j] *= eps ** (p - 2) if r <= eps else r ** (p - 2)
    A = np.zeros((n, n))
    for i in range(n):
        m = max(H[i, j] for j in range(n) if j != i)
        z = sum(math.exp(H[i, j] - m) for j in range(n) if j != i)
        for j in range(n):
            A[i, j] = 0.0 if j == i else math.exp(H[i, j] - m) / z
    out = np.zeros_like(Y)
    for i in range(n):
        for c in range(d):
            msg = sum(A[i, j] * Y[j, c] for j in range(n))
            val = Y[i, c] + msg if variant == "gmp_baseline" else (Y[i, c] + msg + Y0[i, c]) / 3
            out[i, c] = max(val, 0.0)
    return A, out


class TestConfig:
    def test_defaults(self):
        c = UmpConfig()
        assert (c.num_layers, c.variant, c.epsilon, c.p) == (5, "unrolled_reweighted", 0.5, 0.1)

    @pytest.mark.parametrize("kw", [{"num_layers": 0}, {"variant": "gcn"}, {"p": 0.0}, {"epsilon": -1.0}])
    def test_rejects(self, kw):
        with pytest.raises(ParameterError):
            UmpConfig(**kw)


class TestAttention:
    def test_two_node_score(self, rng):
        d = 3
        tape = ad.Tape()
        Y = rng.normal(size=(2, d))
        U = sym_union(rng, 2, d)
        w = rng.normal(size=(3 * d, 1))
        H = attention_scores(tape.leaf(Y), U, tape.leaf(w)).value
        assert H[0, 1] == pytest.approx(float(np.dot(w[:, 0], np.concatenate([Y[0], Y[1], U[0, 1]]))), rel=1e-12)
        assert H[0, 1] != pytest.approx(H[1, 0])

    def test_zero_weights_uniform(self, rng):
        tape = ad.Tape()
        n, d = 5, 3
        params = make_params(tape, rng, d, w_a=np.zeros((3 * d, 1)))
        st_ = ump_layer(tape.leaf(rng.normal(size=(n, d))), tape.const(np.zeros((n, d))), sym_union(rng, n, d), params, UmpConfig(variant="unrolled"))
        expected = (np.ones((n, n)) - np.eye(n)) / (n - 1)
        np.testing.assert_allclose(st_.A_tilde.value, expected, atol=1e-15)

    def test_shape_mismatch(self, rng):
        tape = ad.Tape()
        with pytest.raises(DimensionError):
            attention_scores(tape.leaf(np.zeros((3, 2))), np.zeros((3, 3, 2)), tape.leaf(np.zeros((5, 1))))
        with pytest.raises(DimensionError):
            attention_scores(tape.leaf(np.zeros((3, 2))), np.zeros((3, 3, 4)), tape.leaf(np.zeros((6, 1))))

    def test_mask(self):
        m = attention_mask(4, scene_of=[0, 0, 1, 2])
        assert m[0, 1] and m[1, 0] and not m[0, 0] and not m[0, 2]
        assert m[3, 3] and m[3].sum() == 1


class TestLayer:
    @pytest.mark.parametrize("variant", ["gmp_baseline", "unrolled", "unrolled_reweighted"])
    def test_matches_scalar_oracle(self, rng, variant):
        n, d = 3, 2
        tape = ad.Tape()
        Y, Y0 = rng.normal(size=(n, d)) * 0.4, rng.normal(size=(n, d))
        U = sym_union(rng, n, d)
        params = make_params(tape, rng, d)
        st_ = ump_layer(tape.leaf(Y), tape.const(Y0), U, params, UmpConfig(variant=variant))
        A, out = layer_oracle(Y, Y0, U, params.w_a.value[:, 0], variant)
        np.testing.assert_allclose(st_.A_tilde.value, A, atol=1e-12)
        np.testing.assert_allclose(st_.Y.value, out, atol=1e-12)

    def test_p2_reweighted_equals_unrolled(self, rng):
        n, d = 6, 3
        Y, Y0, U = rng.normal(size=(n, d)), rng.normal(size=(n, d)), sym_union(rng, n, d)
        outs = []
        for variant in ("unrolled", "unrolled_reweighted"):
            tape = ad.Tape()
            params = make_params(tape, np.random.default_rng(5), d)
            outs.append(ump_layer(tape.leaf(Y), tape.const(Y0), U, params, UmpConfig(variant=variant, p=2.0)).Y.value)
        np.testing.assert_array_equal(outs[0], outs[1])

    @pytest.mark.parametrize("variant", ["unrolled", "unrolled_reweighted"])
    def test_fixed_point(self, rng, variant):
        n, d = 5, 3
        tape = ad.Tape()
        params = make_params(tape, rng, d, w_a=np.zeros((3 * d, 1)))
        A = (np.ones((n, n)) - np.eye(n)) / (n - 1)
        Yk = rng.uniform(0.1, 2.0, size=(n, d))
        Y0 = (2 * np.eye(n) - A) @ Yk
        st_ = ump_layer(tape.leaf(Yk), tape.const(Y0), sym_union(rng, n, d), params, UmpConfig(variant=variant))
        np.testing.assert_allclose(st_.Y.value, Yk, atol=1e-10)

    def test_row_stochastic_under_reweighting(self, rng):
        for _ in range(20):
            n, d = int(rng.integers(2, 9)), 3
            tape = ad.Tape()
            params = make_params(tape, rng, d)
            st_ = ump_layer(tape.leaf(rng.normal(size=(n, d)) * 2), tape.const(np.zeros((n, d))), sym_union(rng, n, d), params, UmpConfig())
            np.testing.assert_allclose(st_.A_tilde.value.sum(axis=1), 1.0, atol=1e-10)
            assert np.all(np.diag(st_.A_tilde.value) == 0)
            assert np.all(st_.Omega > 0)

    @pytest.mark.parametrize("variant,factor", [("unrolled", None), ("gmp_baseline", 2.0)])
    def test_single_node(self, rng, variant, factor):
        tape = ad.Tape()
        Y, Y0 = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
        params = make_params(tape, rng, 3)
        out = ump_layer(tape.leaf(Y), tape.const(Y0), rng.normal(size=(1, 1, 3)), params, UmpConfig(variant=variant)).Y.value
        expected = np.maximum(2 * Y, 0) if factor else np.maximum((2 * Y + Y0) / 3, 0)
        np.testing.assert_allclose(out, expected, atol=1e-15)

    def test_shape_mismatch(self, rng):
        tape = ad.Tape()
        params = make_params(tape, rng, 2)
        with pytest.raises(DimensionError):
            ump_layer(tape.leaf(np.zeros((3, 2))), tape.const(np.zeros((2, 2))), np.zeros((3, 3, 2)), params, UmpConfig())

    def test_gradient_step_identity(self, rng):
        for _ in range(10):
            n, d = int(rng.integers(2, 10)), 3
            tape = ad.Tape()
            params = make_params(tape, rng, d)
            Y, Y0 = rng.normal(size=(n, d)), rng.normal(size=(n, d))
            st_ = ump_layer(tape.leaf(Y), tape.const(Y0), sym_union(rng, n, d), params, UmpConfig(variant="unrolled"))
            A = st_.A_tilde.value
            lap = LaplacianForm.build(A, "random_walk")
            linear = (Y + A @ Y + Y0) / 3
            np.testing.assert_allclose(gradient_step(Y, Y0, lap, 1 / 6), linear, atol=1e-12)
            np.testing.assert_allclose(st_.Y.value, np.maximum(linear, 0), atol=1e-12)

    def test_spurious_edge_suppression(self):
        """A strong cross-cluster score loses attention mass when distant pairs are down-weighted."""
        wins = 0
        for seed in range(100):
            r = np.random.default_rng(seed)
            m, d = 4, 3
            n = 2 * m
            centers = np.zeros((2, d))
            centers[1, 0] = 6.0
            Y = np.repeat(centers, m, axis=0) + r.normal(scale=0.08, size=(n, d))
            cluster = np.repeat([0, 1], m)
            U = np.zeros((n, n, d))
            same = cluster[:, None] == cluster[None, :]
            U[..., 0] = np.where(same, r.uniform(0.5, 1.5, size=(n, n)), r.uniform(-0.5, 0.5, size=(n, n)))
            i, j = 0, m + int(r.integers(m))
            U[i, j, 0] = U[j, i, 0] = 3.0
            w_a = np.zeros((3 * d, 1))
            w_a[2 * d, 0] = 1.0
            mass = {}
            for p in (0.1, 2.0):
                tape = ad.Tape()
                params = make_params(tape, r, d, w_a=w_a)
                A = ump_layer(tape.leaf(Y), tape.const(Y), U, params, UmpConfig(p=p)).A_tilde.value
                mass[p] = A[~same].sum()
            wins += mass[0.1] < mass[2.0]
        assert wins >= 95

    @pytest.mark.parametrize("seed", range(5))
    def test_frozen_attention_iteration_is_cauchy(self, seed):
        r = np.random.default_rng(seed)
        n, d = int(r.integers(3, 12)), 4
        H = r.normal(size=(n, n))
        np.fill_diagonal(H, -np.inf)
        A = np.exp(H - H.max(axis=1, keepdims=True))
        A /= A.sum(axis=1, keepdims=True)
        Y0 = r.uniform(0, 1, size=(n, d))
        Y = Y0.copy()
        steps = []
        for _ in range(40):
            Yn = np.maximum((Y + A @ Y + Y0) / 3, 0)
            steps.append(np.linalg.norm(Yn - Y))
            Y = Yn
        assert all(b <= a + 1e-15 for a, b in zip(steps, steps[1:]))
        assert steps[-1] < 1e-5 * max(steps[0], 1e-300) or steps[-1] < 1e-12


class TestRun:
    def test_one_layer_equals_layer(self, rng):
        n, d = 4, 3
        X, U = rng.normal(size=(n, d)), sym_union(rng, n, d)
        tape = ad.Tape()
        params = make_params(tape, rng, d)
        Y = run_ump(X, U, params, UmpConfig(num_layers=1))
        single = ump_layer(tape.const(X), tape.const(X), U, params, UmpConfig())
        np.testing.assert_array_equal(Y.value, single.Y.value)

    @given(st.integers(0, 1000), st.sampled_from(["gmp_baseline", "unrolled", "unrolled_reweighted"]))
    def test_nonnegative_and_deterministic(self, seed, variant):
        r = np.random.default_rng(seed)
        n, d, d_raw = int(r.integers(1, 7)), 3, 5
        X, U = r.normal(size=(n, d_raw)), sym_union(r, n, d)
        outs = []
        for _ in range(2):
            tape = ad.Tape()
            params = make_params(tape, np.random.default_rng(seed), d, d_raw=d_raw)
            outs.append(run_ump(X, U, params, UmpConfig(num_layers=5, variant=variant)).value)
        assert np.all(outs[0] >= 0)
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_batched_scenes_do_not_interact(self, rng):
        d = 3
        Xa, Xb = rng.normal(size=(3, d)), rng.normal(size=(4, d))
        Ua, Ub = sym_union(rng, 3, d), sym_union(rng, 4, d)
        U = np.zeros((7, 7, d))
        U[:3, :3], U[3:, 3:] = Ua, Ub
        tape = ad.Tape()
        params = make_params(tape, rng, d)
        joint = run_ump(np.vstack([Xa, Xb]), U, params, UmpConfig(), scene_of=[0] * 3 + [1] * 4).value
        np.testing.assert_allclose(joint[:3], run_ump(Xa, Ua, params, UmpConfig()).value, atol=1e-12)
        np.testing.assert_allclose(joint[3:], run_ump(Xb, Ub, params, UmpConfig()).value, atol=1e-12)

    def test_parameters_receive_gradients(self, rng):
        n, d = 5, 3
        tape = ad.Tape()
        params = make_params(tape, rng, d, d_raw=4)
        Y = run_ump(rng.normal(size=(n, 4)), sym_union(rng, n, d), params, UmpConfig())
        tape.backward(ad.sum_all(Y))
        for node in (params.w_a, params.W_in):
            assert np.any(node.grad != 0)


class TestClassify:
    def test_zero_weights_uniform(self, rng):
        tape = ad.Tape()
        T = classify_nodes(tape.const(rng.normal(size=(4, 3))), tape.leaf(np.zeros((5, 3)))).value
        np.testing.assert_allclose(T, 0.2, atol=1e-15)

    def test_rows_and_argmax(self, rng):
        tape = ad.Tape()
        Y, W = rng.normal(size=(10, 3)), rng.normal(size=(6, 3))
        T = classify_nodes(tape.const(Y), tape.leaf(W)).value
        np.testing.assert_allclose(T.sum(axis=1), 1.0, atol=1e-12)
        for i in range(10):
            scores = [sum(W[o, c] * Y[i, c] for c in range(3)) for o in range(6)]
            assert int(np.argmax(T[i])) == scores.index(max(scores))

    def test_shape_mismatch(self):
        tape = ad.Tape()
        with pytest.raises(DimensionError):
            classify_nodes(tape.const(np.zeros((2, 3))), tape.leaf(np.zeros((4, 2))))
