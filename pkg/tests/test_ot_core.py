import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from otfed.datasets import Dataset
from otfed.ot_core import (
    ConvergenceError,
    CostMatrix,
    Coupling,
    barycentric_map,
    cost_matrix,
    exact_ot_assignment,
    save_coupling,
    sinkhorn,
    transport_cost,
    wasserstein_distance,
)

from oracles import brute_force_assignment, naive_sinkhorn, pairwise_sq_dists


class TestCostMatrix:
    def test_single_point_zero(self):
        cm = cost_matrix(np.array([[1.0, 2.0]]), np.array([[1.0, 2.0]]))
        np.testing.assert_allclose(cm.values, [[0.0]])

    def test_hand_arithmetic(self):
        cm = cost_matrix(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]]))
        np.testing.assert_allclose(cm.values, [[25.0]])
        eu = cost_matrix(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]]), metric="euclidean")
        np.testing.assert_allclose(eu.values, [[5.0]])

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        X, Y = rng.standard_normal((4, 3)), rng.standard_normal((6, 3))
        np.testing.assert_allclose(
            cost_matrix(X, Y).values, cost_matrix(Y, X).values.T, atol=1e-12
        )

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        X, Y = rng.standard_normal((5, 4)), rng.standard_normal((7, 4))
        np.testing.assert_allclose(cost_matrix(X, Y).values, pairwise_sq_dists(X, Y), atol=1e-10)

    def test_normalize_scales_to_unit_max(self):
        rng = np.random.default_rng(2)
        X, Y = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
        cm = cost_matrix(X, Y, normalize=True)
        np.testing.assert_allclose(cm.values.max(), 1.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            cost_matrix(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_rejects_negative_and_nonfinite(self):
        with pytest.raises(ValueError, match="negative"):
            CostMatrix(np.array([[-1.0]]))
        with pytest.raises(ValueError, match="finite"):
            CostMatrix(np.array([[np.inf]]))


class TestSinkhorn:
    def test_constant_cost_gives_independent_coupling(self):
        C = CostMatrix(np.full((2, 2), 3.0))
        a = b = np.array([0.5, 0.5])
        coup = sinkhorn(C, a, b, epsilon=0.7)
        np.testing.assert_allclose(coup.plan, np.full((2, 2), 0.25), atol=1e-12)

    def test_one_by_one(self):
        coup = sinkhorn(CostMatrix(np.array([[2.0]])), [1.0], [1.0], epsilon=1.0)
        np.testing.assert_allclose(coup.plan, [[1.0]])

    def test_matches_fixed_point_oracle(self):
        C = np.array([[0.0, 1.0], [1.0, 0.0]])
        a = b = np.array([0.5, 0.5])
        coup = sinkhorn(CostMatrix(C), a, b, epsilon=0.1)
        ref = naive_sinkhorn(C, a, b, epsilon=0.1)
        np.testing.assert_allclose(coup.plan, ref, atol=1e-8)
        # symmetric, diagonal-dominant
        np.testing.assert_allclose(coup.plan, coup.plan.T, atol=1e-10)
        assert coup.plan[0, 0] > coup.plan[0, 1]

    def test_matches_oracle_random_instances(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            n, m = rng.integers(2, 7, size=2)
            C = rng.random((n, m)) * 3
            a = rng.random(n) + 0.2
            a /= a.sum()
            b = rng.random(m) + 0.2
            b /= b.sum()
            coup = sinkhorn(CostMatrix(C), a, b, epsilon=0.3)
            ref = naive_sinkhorn(C, a, b, epsilon=0.3)
            np.testing.assert_allclose(coup.plan, ref, atol=1e-8)

    def test_marginals_within_tolerance(self):
        rng = np.random.default_rng(7)
        C = rng.random((8, 5))
        a = rng.random(8) + 0.1
        a /= a.sum()
        b = rng.random(5) + 0.1
        b /= b.sum()
        coup = sinkhorn(CostMatrix(C), a, b, epsilon=0.2, tol=1e-9)
        assert np.abs(coup.plan.sum(axis=1) - a).sum() <= 1e-9
        assert np.abs(coup.plan.sum(axis=0) - b).sum() <= 1e-9
        assert coup.violation <= 1e-9
        assert coup.iterations >= 1

    def test_scaling_structure_is_rank_one(self):
        rng = np.random.default_rng(3)
        C = rng.random((6, 6))
        a = b = np.full(6, 1 / 6)
        coup = sinkhorn(CostMatrix(C), a, b, epsilon=0.5)
        ratio = coup.plan * np.exp(C / 0.5)
        s = np.linalg.svd(ratio, compute_uv=False)
        assert s[1] <= 1e-6 * s[0]

    def test_entropic_monotonicity(self):
        rng = np.random.default_rng(11)
        C = CostMatrix(rng.random((6, 7)))
        a = rng.random(6) + 0.3
        a /= a.sum()
        b = rng.random(7) + 0.3
        b /= b.sum()
        lo = transport_cost(sinkhorn(C, a, b, epsilon=0.05), C)
        hi = transport_cost(sinkhorn(C, a, b, epsilon=0.5), C)
        assert lo <= hi + 1e-12

    def test_input_validation(self):
        C = CostMatrix(np.zeros((2, 2)))
        ok = np.array([0.5, 0.5])
        with pytest.raises(ValueError, match="epsilon"):
            sinkhorn(C, ok, ok, epsilon=0.0)
        with pytest.raises(ValueError, match="sums to"):
            sinkhorn(C, np.array([0.5, 0.6]), ok, epsilon=1.0)
        with pytest.raises(ValueError, match="strictly positive"):
            sinkhorn(C, np.array([0.0, 1.0]), ok, epsilon=1.0)
        with pytest.raises(ValueError, match="shape"):
            sinkhorn(C, np.array([0.2, 0.3, 0.5]), ok, epsilon=1.0)

    def test_nonconvergence_is_a_hard_error(self):
        rng = np.random.default_rng(5)
        C = CostMatrix(rng.random((6, 6)))
        a = rng.random(6) + 0.1
        a /= a.sum()
        b = rng.random(6) + 0.1
        b /= b.sum()
        with pytest.raises(ConvergenceError):
            sinkhorn(C, a, b, epsilon=0.001, tol=1e-9, max_iter=2)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 5), st.integers(2, 5), st.integers(0, 10**6))
    def test_property_marginals_hold(self, n, m, seed):
        rng = np.random.default_rng(seed)
        C = rng.random((n, m))
        a = rng.random(n) + 0.1
        a /= a.sum()
        b = rng.random(m) + 0.1
        b /= b.sum()
        coup = sinkhorn(CostMatrix(C), a, b, epsilon=0.25)
        assert np.abs(coup.plan.sum(axis=1) - a).sum() <= 1e-9
        assert np.abs(coup.plan.sum(axis=0) - b).sum() <= 1e-9
        assert abs(coup.plan.sum() - 1.0) <= 1e-9


class TestExactAssignment:
    def test_identity_optimal(self):
        coup = exact_ot_assignment(CostMatrix(np.array([[0.0, 1.0], [1.0, 0.0]])))
        np.testing.assert_allclose(coup.plan, [[0.5, 0.0], [0.0, 0.5]])

    def test_one_by_one(self):
        coup = exact_ot_assignment(CostMatrix(np.array([[7.0]])))
        np.testing.assert_allclose(coup.plan, [[1.0]])

    def test_matches_enumeration_cost(self):
        rng = np.random.default_rng(3)
        C = rng.random((4, 4))
        coup = exact_ot_assignment(CostMatrix(C))
        _, best = brute_force_assignment(C)
        np.testing.assert_allclose(transport_cost(coup, CostMatrix(C)), best / 4, atol=1e-12)

    def test_matches_enumeration_permutation(self):
        for seed in range(30):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(2, 7))
            C = rng.random((n, n))
            coup = exact_ot_assignment(CostMatrix(C))
            perm, _ = brute_force_assignment(C)
            got = np.argmax(coup.plan, axis=1)
            np.testing.assert_array_equal(got, perm)

    def test_tie_break_is_lexicographic(self):
        # every permutation of a constant cost is optimal -> identity wins
        coup = exact_ot_assignment(CostMatrix(np.full((4, 4), 2.0)))
        np.testing.assert_array_equal(np.argmax(coup.plan, axis=1), [0, 1, 2, 3])
        # two optima: (0,1) and (1,0); lexicographic picks (0,1)
        C = np.array([[1.0, 1.0], [1.0, 1.0]])
        coup = exact_ot_assignment(CostMatrix(C))
        np.testing.assert_array_equal(np.argmax(coup.plan, axis=1), [0, 1])

    def test_rejects_nonsquare(self):
        with pytest.raises(ValueError, match="square"):
            exact_ot_assignment(CostMatrix(np.zeros((2, 3))))

    def test_beats_every_permutation(self):
        rng = np.random.default_rng(9)
        C = rng.random((5, 5))
        coup = exact_ot_assignment(CostMatrix(C))
        got = transport_cost(coup, CostMatrix(C))
        import itertools

        for perm in itertools.permutations(range(5)):
            c = sum(C[i, perm[i]] for i in range(5)) / 5
            assert got <= c + 1e-12


class TestTransportCost:
    def test_examples(self):
        one = Coupling(np.array([[1.0]]), [1.0], [1.0])
        assert transport_cost(one, CostMatrix(np.array([[5.0]]))) == 5.0
        diag = Coupling(np.array([[0.5, 0.0], [0.0, 0.5]]), [0.5, 0.5], [0.5, 0.5])
        assert transport_cost(diag, CostMatrix(np.zeros((2, 2)))) == 0.0
        assert transport_cost(diag, CostMatrix(np.array([[0.0, 1.0], [1.0, 0.0]]))) == 0.0

    def test_shape_mismatch(self):
        one = Coupling(np.array([[1.0]]), [1.0], [1.0])
        with pytest.raises(ValueError, match="mismatch"):
            transport_cost(one, CostMatrix(np.zeros((2, 2))))


class TestWassersteinDistance:
    def test_identical_clouds_zero(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((6, 3))
        d = wasserstein_distance(Dataset(X), Dataset(X.copy()))
        assert abs(d) <= 1e-12

    def test_one_dim_hand_value(self):
        A = Dataset(np.array([[0.0]]))
        B = Dataset(np.array([[3.0]]))
        np.testing.assert_allclose(wasserstein_distance(A, B), 9.0)

    def test_matches_enumeration(self):
        rng = np.random.default_rng(4)
        XA, XB = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
        got = wasserstein_distance(Dataset(XA), Dataset(XB))
        _, best = brute_force_assignment(pairwise_sq_dists(XA, XB))
        np.testing.assert_allclose(got, best / 5, atol=1e-12)

    def test_subsample_is_deterministic(self):
        rng = np.random.default_rng(5)
        A = Dataset(rng.standard_normal((12, 3)))
        B = Dataset(rng.standard_normal((7, 3)))
        d1 = wasserstein_distance(A, B, seed=2)
        d2 = wasserstein_distance(A, B, seed=2)
        assert d1 == d2

    def test_entropic_mode_nonnegative(self):
        rng = np.random.default_rng(6)
        A = Dataset(rng.standard_normal((5, 2)))
        B = Dataset(rng.standard_normal((8, 2)))
        d = wasserstein_distance(A, B, epsilon=0.5)
        assert d >= 0.0

    def test_exact_mode_requires_uniform_weights(self):
        w = np.array([0.7, 0.1, 0.1, 0.1])
        A = Dataset(np.zeros((4, 1)), weights=w)
        with pytest.raises(ValueError, match="uniform"):
            wasserstein_distance(A, Dataset(np.zeros((4, 1))))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            wasserstein_distance(Dataset(np.zeros((2, 2))), Dataset(np.zeros((2, 3))))


class TestBarycentricMap:
    def test_point_mass_row(self):
        plan = np.array([[0.0, 0.0, 0.0, 0.5], [0.125, 0.125, 0.125, 0.125]])
        coup = Coupling(plan, [0.5, 0.5], plan.sum(axis=0))
        Y = np.arange(8.0).reshape(4, 2)
        out = barycentric_map(coup, Y)
        np.testing.assert_allclose(out[0], Y[3])

    def test_uniform_plan_maps_to_mean(self):
        plan = np.full((3, 4), 1.0 / 12)
        coup = Coupling(plan, np.full(3, 1 / 3), np.full(4, 0.25))
        Y = np.random.default_rng(1).standard_normal((4, 2))
        out = barycentric_map(coup, Y)
        for i in range(3):
            np.testing.assert_allclose(out[i], Y.mean(axis=0), atol=1e-12)

    def test_outputs_in_target_bounding_box(self):
        rng = np.random.default_rng(8)
        X = np.vstack([rng.standard_normal((10, 2)), rng.standard_normal((10, 2)) + 6])
        Y = np.vstack([rng.standard_normal((12, 2)), rng.standard_normal((12, 2)) + 6])
        C = cost_matrix(X, Y, normalize=True)
        coup = sinkhorn(C, np.full(20, 1 / 20), np.full(24, 1 / 24), epsilon=0.05)
        out = barycentric_map(coup, Y)
        for j in range(2):
            assert out[:, j].min() >= Y[:, j].min() - 1e-9
            assert out[:, j].max() <= Y[:, j].max() + 1e-9

    def test_zero_row_mass_rejected(self):
        plan = np.array([[0.0, 0.0], [0.5, 0.5]])
        coup = Coupling(plan, [0.0, 1.0], [0.5, 0.5])
        with pytest.raises(ValueError, match="zero row mass"):
            barycentric_map(coup, np.zeros((2, 2)))

    def test_target_shape_mismatch(self):
        coup = Coupling(np.array([[1.0]]), [1.0], [1.0])
        with pytest.raises(ValueError, match="match"):
            barycentric_map(coup, np.zeros((3, 2)))


class TestCouplingValidationAndExport:
    def test_rejects_negative_plan(self):
        with pytest.raises(ValueError, match="negative"):
            Coupling(np.array([[1.5, -0.5]]), [1.0], [0.5, 0.5])

    def test_rejects_wrong_mass(self):
        with pytest.raises(ValueError, match="mass"):
            Coupling(np.array([[0.7]]), [1.0], [1.0])

    def test_rejects_marginal_mismatch(self):
        with pytest.raises(ValueError, match="violation"):
            Coupling(np.array([[0.5, 0.5]]), [1.0], [0.9, 0.1])

    def test_save_coupling_writes_plan_and_metadata(self, tmp_path):
        rng = np.random.default_rng(0)
        C = CostMatrix(rng.random((3, 4)))
        a = np.full(3, 1 / 3)
        b = np.full(4, 0.25)
        coup = sinkhorn(C, a, b, epsilon=0.3)
        out = tmp_path / "plan.csv"
        save_coupling(coup, out)
        back = np.loadtxt(out, delimiter=",")
        np.testing.assert_allclose(back, coup.plan, rtol=1e-15)
        import json

        meta = json.loads((tmp_path / "plan.csv.meta.json").read_text())
        assert meta["shape"] == [3, 4]
        assert meta["epsilon"] == 0.3
        assert meta["iterations"] >= 1
        assert meta["marginal_violation"] <= 1e-9
