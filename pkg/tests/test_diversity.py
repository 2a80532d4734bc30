import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from unrolled_sgg import autodiff as ad
from unrolled_sgg.autodiff import ContractError, DimensionError, max_relative_error, numeric_gradient
from unrolled_sgg.diversity import (
    CategoryLookupError,
    FrequencyBias,
    FusionParams,
    diversity_loss,
    fuse,
    infer,
    l21_norm,
    l21_norm_node,
    partition_groups,
    relationship_scores,
    total_loss,
)
from unrolled_sgg.pipeline import column_mass_entropy


def fusion(tape, rng, d, R, zero_r=False):
    return FusionParams(
        W_x=tape.leaf(rng.normal(size=(d, d)) * 0.5),
        W_y=tape.leaf(rng.normal(size=(d, d)) * 0.5),
        W_r=tape.leaf(np.zeros((R, d)) if zero_r else rng.normal(size=(R, d))),
    )


def fuse_oracle(x, y, Wx, Wy):
    d = len(x)
    out = np.zeros(d)
    for k in range(d):
        a = sum(Wx[k, c] * x[c] for c in range(d))
        b = sum(Wy[k, c] * y[c] for c in range(d))
        out[k] = max(a + b, 0.0) - (a - b) ** 2
    return out


def random_row_stochastic(rng, N, R):
    P = rng.exponential(size=(N, R)) ** rng.uniform(0.2, 4)
    return P / P.sum(axis=1, keepdims=True)


class TestFuse:
    def test_identity_equal_inputs(self, rng):
        tape = ad.Tape()
        x = rng.normal(size=(1, 4))
        params = FusionParams(tape.leaf(np.eye(4)), tape.leaf(np.eye(4)), tape.leaf(np.zeros((2, 4))))
        np.testing.assert_array_equal(fuse(tape.const(x), tape.const(x), params).value, np.maximum(2 * x, 0))

    def test_zero(self, rng):
        tape = ad.Tape()
        params = fusion(tape, rng, 3, 2)
        z = tape.const(np.zeros((1, 3)))
        np.testing.assert_array_equal(fuse(z, z, params).value, 0.0)

    def test_oracle(self, rng):
        tape = ad.Tape()
        params = fusion(tape, rng, 5, 2)
        x, y = rng.normal(size=(1, 5)), rng.normal(size=(1, 5))
        out = fuse(tape.const(x), tape.const(y), params).value[0]
        np.testing.assert_allclose(out, fuse_oracle(x[0], y[0], params.W_x.value, params.W_y.value), atol=1e-12)

    def test_shape_mismatch(self, rng):
        tape = ad.Tape()
        with pytest.raises(DimensionError):
            fuse(tape.const(np.zeros((1, 3))), tape.const(np.zeros((1, 2))), fusion(tape, rng, 3, 2))


class TestRelationshipScores:
    def test_uniform_when_silent(self, rng):
        tape = ad.Tape()
        R = 5
        _, pm = relationship_scores(
            tape.const(rng.normal(size=(3, 4))), rng.normal(size=(3, 3, 4)), [(0, 1), (2, 0)], [0, 1, 1],
            fusion(tape, rng, 4, R, zero_r=True), FrequencyBias.zeros(2, R),
        )
        np.testing.assert_allclose(pm.P, 1 / R, atol=1e-15)
        assert pm.group_key == [(0, 1), (1, 0)]

    def test_rows_stochastic(self, rng):
        tape = ad.Tape()
        n, d, R = 6, 3, 7
        pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
        bias = FrequencyBias(rng.normal(size=(3, 3, R)))
        _, pm = relationship_scores(tape.const(rng.normal(size=(n, d))), rng.normal(size=(n, n, d)), pairs, rng.integers(0, 3, n), fusion(tape, rng, d, R), bias)
        np.testing.assert_allclose(pm.P.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(pm.P >= 0)

    def test_single_pair_oracle(self, rng):
        tape = ad.Tape()
        d, R = 3, 4
        Y, U = rng.normal(size=(2, d)), rng.normal(size=(2, 2, d))
        bias = FrequencyBias(rng.normal(size=(2, 2, R)))
        params = fusion(tape, rng, d, R)
        _, pm = relationship_scores(tape.const(Y), U, [(1, 0)], [0, 1], params, bias)
        Wx, Wy, Wr = params.W_x.value, params.W_y.value, params.W_r.value
        z = fuse_oracle(fuse_oracle(Y[1], Y[0], Wx, Wy), U[1, 0], Wx, Wy)
        logits = [sum(Wr[r, c] * z[c] for c in range(d)) + bias.table[1, 0, r] for r in range(R)]
        m = max(logits)
        expected = np.array([math.exp(v - m) for v in logits])
        np.testing.assert_allclose(pm.P[0], expected / expected.sum(), atol=1e-12)

    def test_unknown_category(self, rng):
        tape = ad.Tape()
        with pytest.raises(CategoryLookupError):
            relationship_scores(tape.const(np.zeros((2, 2))), np.zeros((2, 2, 2)), [(0, 1)], [0, 5], fusion(tape, rng, 2, 3), FrequencyBias.zeros(2, 3))

    def test_empty(self, rng):
        tape = ad.Tape()
        with pytest.raises(ContractError):
            relationship_scores(tape.const(np.zeros((2, 2))), np.zeros((2, 2, 2)), [], [0, 0], fusion(tape, rng, 2, 3), FrequencyBias.zeros(2, 3))


class TestFrequencyBias:
    def test_add_one_smoothing(self):
        fb = FrequencyBias.from_triplets([0, 0, 0], [1, 1, 1], [2, 2, 1], 2, 3)
        np.testing.assert_allclose(np.exp(fb.table[0, 1]), [1 / 6, 2 / 6, 3 / 6])
        np.testing.assert_allclose(np.exp(fb.table[1, 1]), 1 / 3)
        assert np.all(np.isfinite(fb.table))

    def test_flat_lookup(self):
        fb = FrequencyBias(np.arange(2 * 2 * 3, dtype=float).reshape(2, 2, 3))
        k = fb.keys([1], [0])
        np.testing.assert_array_equal(fb.flat()[k][0], fb.table[1, 0])


class TestL21:
    def test_examples(self):
        assert l21_norm(np.eye(4)) == 4.0
        P = np.zeros((4, 3))
        P[:, 1] = 1
        assert l21_norm(P) == 2.0
        assert l21_norm(np.full((2, 2), 0.5)) == pytest.approx(math.sqrt(2), abs=1e-12)

    @pytest.mark.parametrize("N,R", [(4, 2), (8, 4), (12, 3)])
    def test_extremals(self, N, R):
        concentrated = np.zeros((N, R))
        concentrated[:, 0] = 1
        balanced = np.eye(R)[np.arange(N) % R]
        uniform = np.full((N, R), 1 / R)
        assert abs(l21_norm(concentrated) - math.sqrt(N)) < 1e-10
        assert abs(l21_norm(uniform) - math.sqrt(N)) < 1e-10
        assert abs(l21_norm(balanced) - math.sqrt(N * R)) < 1e-10
        assert l21_norm(balanced) > l21_norm(concentrated)

    def test_bounds_on_random_matrices(self, rng):
        for _ in range(1000):
            N, R = int(rng.integers(1, 30)), int(rng.integers(1, 12))
            v = l21_norm(random_row_stochastic(rng, N, R))
            assert math.sqrt(N / R) - 1e-12 <= v <= math.sqrt(N * R) + 1e-12

    def test_node_matches_numpy(self, rng):
        P = random_row_stochastic(rng, 5, 3)
        assert float(l21_norm_node(ad.Tape().const(P)).value[0, 0]) == pytest.approx(l21_norm(P), rel=1e-14)

    def test_zero_column_gradient_is_finite(self):
        tape = ad.Tape()
        P = tape.leaf(np.array([[1.0, 0.0], [1.0, 0.0]]))
        tape.backward(l21_norm_node(P))
        assert np.all(np.isfinite(P.grad))


class TestPartition:
    def test_single_key(self):
        part = partition_groups([(1, 2)] * 5)
        assert list(part.groups.values()) == [[0, 1, 2, 3, 4]]

    def test_drops_small_groups(self):
        part = partition_groups([(0, 1), (0, 1), (2, 2), (2, 2), (2, 2)], min_group_size=3)
        assert list(part.groups) == [(2, 2)] and part.dropped == [(0, 1)]
        assert partition_groups([(0, 1), (0, 1)], variant="batch").num_groups == 1

    def test_hand_fixture(self):
        keys = [(0, 1), (1, 0), (0, 1), (2, 3), (0, 1), (1, 0), (1, 0), (2, 3)]
        images = [0, 0, 0, 1, 1, 1, 2, 2]
        assert dict(partition_groups(keys, variant="batch").groups) == {(0, 1): [0, 2, 4], (1, 0): [1, 5, 6], (2, 3): [3, 7]}
        assert dict(partition_groups(keys, variant="batch_pruned").groups) == {(0, 1): [0, 2, 4], (1, 0): [1, 5, 6]}
        image = partition_groups(keys, images, variant="image").groups
        assert list(image.values()) == [[0, 1, 2], [3, 4, 5], [6, 7]]

    def test_disjoint_cover(self, rng):
        keys = [tuple(k) for k in rng.integers(0, 3, size=(40, 2))]
        part = partition_groups(keys, variant="batch")
        rows = sorted(r for g in part.groups.values() for r in g)
        assert rows == list(range(40))

    def test_errors(self):
        with pytest.raises(ValueError):
            partition_groups([(0, 0)], variant="global")
        with pytest.raises(ContractError):
            partition_groups([(0, 0)], variant="image")


def loss_value(logits, partition, tau, targets):
    tape = ad.Tape()
    return float(diversity_loss(tape.const(logits), partition, tau, targets).value[0, 0])


class TestDiversityLoss:
    def test_tau_zero_is_mean_ce(self, rng):
        Z = rng.normal(size=(6, 4))
        t = rng.integers(0, 4, 6)
        logp = Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))
        expected = -logp[np.arange(6), t].mean()
        assert loss_value(Z, partition_groups([(0, 0)] * 6), 0.0, t) == pytest.approx(expected, rel=1e-12)

    def test_identity_predictions(self):
        R, tau = 5, 0.1
        part = partition_groups([(0, 0)] * R)
        assert loss_value(60.0 * np.eye(R), part, tau, list(range(R))) == pytest.approx(-tau, abs=1e-10)

    def test_errors(self):
        tape = ad.Tape()
        with pytest.raises(ContractError):
            diversity_loss(tape.const(np.zeros((0, 3))), partition_groups([]), 0.1, [])
        with pytest.raises(ValueError):
            diversity_loss(tape.const(np.zeros((1, 3))), partition_groups([(0, 0)]), -0.1, [0])

    @given(st.integers(0, 10_000))
    def test_permutation_invariance(self, seed):
        r = np.random.default_rng(seed)
        N, R = 12, 4
        Z = r.normal(size=(N, R))
        t = r.integers(0, R, N)
        keys = [tuple(k) for k in r.integers(0, 2, size=(N, 2))]
        base = loss_value(Z, partition_groups(keys, variant="batch"), 0.3, t)
        perm = r.permutation(N)
        permuted = loss_value(Z[perm], partition_groups([keys[i] for i in perm], variant="batch"), 0.3, t[perm])
        assert permuted == pytest.approx(base, rel=1e-12, abs=1e-12)

    def test_gradient_on_toy_batch(self, rng):
        n, d, R = 3, 3, 4
        Y, U = rng.uniform(0.1, 1, size=(n, d)), rng.normal(size=(n, n, d))
        pairs = [(0, 1), (1, 0), (0, 2), (2, 1)]
        labels = [0, 0, 1]
        bias = FrequencyBias(rng.normal(size=(2, 2, R)) * 0.1)
        base = {"W_x": rng.normal(size=(d, d)) * 0.5, "W_y": rng.normal(size=(d, d)) * 0.5, "W_r": rng.normal(size=(R, d))}
        targets = [1, 0, 2, 0]

        def build(tape, vals):
            params = FusionParams(*(tape.leaf(vals[k]) for k in ("W_x", "W_y", "W_r")))
            logits, pm = relationship_scores(tape.leaf(Y), U, pairs, labels, params, bias)
            part = partition_groups(pm.group_key, variant="batch", min_group_size=1)
            return params, diversity_loss(logits, part, 0.5, targets)

        tape = ad.Tape()
        params, loss = build(tape, base)
        tape.backward(loss)
        for name, leaf in zip(("W_x", "W_y", "W_r"), (params.W_x, params.W_y, params.W_r)):

            def f(x, name=name):
                return float(build(ad.Tape(), {**base, name: x})[1].value[0, 0])

            assert max_relative_error(leaf.grad, numeric_gradient(f, base[name]), floor=1e-6) < 1e-5

    @pytest.mark.parametrize("seed", range(10))
    def test_tau_raises_column_mass_entropy(self, seed):
        r = np.random.default_rng(seed)
        N, R = 16, 5
        Z0 = r.normal(size=(N, R))
        Z0[:, 0] += 3.0  # collapsed onto one column
        targets = r.integers(0, R, N)
        part = partition_groups([(0, 0)] * N)
        after = {}
        for tau in (0.0, 0.1, 0.5, 1.0):
            tape = ad.Tape()
            Z = tape.leaf(Z0)
            tape.backward(diversity_loss(Z, part, tau, targets))
            Z1 = Z0 - 1.0 * Z.grad
            P = np.exp(Z1 - Z1.max(axis=1, keepdims=True))
            after[tau] = column_mass_entropy(P / P.sum(axis=1, keepdims=True))
        for tau in (0.1, 0.5, 1.0):
            assert after[tau] >= after[0.0] - 1e-12


class TestTotalAndInfer:
    def test_zero(self):
        tape = ad.Tape()
        logits = tape.const(80.0 * np.eye(3))
        rel = tape.const(np.zeros((1, 1)))
        assert float(total_loss(logits, [0, 1, 2], rel, 3).value[0, 0]) == pytest.approx(0.0, abs=1e-30)

    def test_additive(self, rng):
        tape = ad.Tape()
        Z = rng.normal(size=(4, 3))
        t = [0, 2, 1, 1]
        logp = Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))
        ce = -logp[np.arange(4), t].sum()
        out = total_loss(tape.const(Z), t, tape.const(np.array([[0.7]])), 2)
        assert float(out.value[0, 0]) == pytest.approx(ce / 2 + 0.7, rel=1e-12)
        with pytest.raises(ContractError):
            total_loss(tape.const(Z), t, tape.const(np.zeros((1, 1))), 0)

    def test_gradient(self, rng):
        Z0, t = rng.normal(size=(5, 4)), [3, 0, 1, 1, 2]
        tape = ad.Tape()
        Z = tape.leaf(Z0)
        tape.backward(total_loss(Z, t, tape.const(np.zeros((1, 1))), 5))

        def f(x):
            tp = ad.Tape()
            return float(total_loss(tp.const(x), t, tp.const(np.zeros((1, 1))), 5).value[0, 0])

        assert max_relative_error(Z.grad, numeric_gradient(f, Z0)) < 1e-6

    def test_infer(self, rng):
        e, q = infer(np.eye(3)[[2, 0, 1]], np.full((2, 4), 0.25))
        np.testing.assert_array_equal(e, [2, 0, 1])
        np.testing.assert_array_equal(q, [0, 0])
        T = random_row_stochastic(rng, 20, 6)
        e, _ = infer(T, T)
        assert list(e) == [max(range(6), key=lambda j: (T[i, j], -j)) for i in range(20)]
