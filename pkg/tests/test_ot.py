import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sleepalign import ot


def permutation_oracle(c):
    """Exhaustive min-cost perfect matching / n: the uniform-weight optimum
    by Birkhoff's theorem."""
    n = c.shape[0]
    return min(
        sum(c[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n))
    ) / n


def vertex_oracle(c, a, b):
    """Enumerate basic feasible solutions of the transportation polytope and
    return the minimum objective."""
    m, n = c.shape
    cells = [(i, j) for i in range(m) for j in range(n)]
    rhs = np.concatenate([a, b])
    best = np.inf
    for combo in itertools.combinations(range(m * n), m + n - 1):
        mat = np.zeros((m + n, m + n - 1))
        for k, ci in enumerate(combo):
            i, j = cells[ci]
            mat[i, k] = 1.0
            mat[m + j, k] = 1.0
        sol, *_ = np.linalg.lstsq(mat, rhs, rcond=None)
        if np.abs(mat @ sol - rhs).max() > 1e-9 or sol.min() < -1e-10:
            continue
        best = min(best, sum(sol[k] * c[cells[ci]] for k, ci in enumerate(combo)))
    return best


def random_feasible_plan(rng, a, b):
    """Random marginal-respecting coupling via proportional fill plus noise
    rebalanced by alternating scaling; projected to exact marginals."""
    p = np.outer(a, b) * rng.uniform(0.5, 2.0, size=(len(a), len(b)))
    for _ in range(200):
        p *= (a / p.sum(axis=1))[:, None]
        p *= (b / p.sum(axis=0))[None, :]
    return ot._round_to_polytope(p, a, b)


class TestCostMatrix:
    def test_hand_example(self):
        a = np.array([[0.0, 0.0], [1.0, 0.0]])
        c = ot.cost_matrix(a, a, "euclidean")
        assert np.allclose(c.values, [[0, 1], [1, 0]])

    def test_single_vectors(self):
        u, v = np.array([[1.0, 2.0]]), np.array([[4.0, 6.0]])
        c = ot.cost_matrix(u, v)
        assert c.values.shape == (1, 1)
        assert c.values[0, 0] == pytest.approx(5.0)

    def test_nested_loop_oracle(self):
        rng = np.random.default_rng(7)
        a, b = rng.normal(size=(4, 6)), rng.normal(size=(3, 6))
        c = ot.cost_matrix(a, b, "euclidean")
        for i in range(4):
            for j in range(3):
                assert c.values[i, j] == pytest.approx(
                    np.linalg.norm(a[i] - b[j]), abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ot.OtError, match="dimension"):
            ot.cost_matrix(np.zeros((2, 3)), np.zeros((2, 4)))

    def test_nonfinite_rejected(self):
        bad = np.array([[np.nan, 0.0]])
        with pytest.raises(ot.OtError, match="non-finite"):
            ot.cost_matrix(bad, bad)

    def test_symmetric_on_self(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(5, 3))
        c = ot.cost_matrix(a, a).values
        assert np.allclose(c, c.T)
        assert np.allclose(np.diag(c), 0.0)


class TestEmdExact:
    def test_identical_sets_zero(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 3))
        res = ot.emd_exact(ot.cost_matrix(a, a))
        assert res.value == pytest.approx(0.0, abs=1e-12)

    def test_two_point_masses(self):
        res = ot.emd_exact(np.array([[3.0]]))
        assert res.value == pytest.approx(3.0)

    def test_permutation_oracle_uniform(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            n = int(rng.integers(2, 6))
            c = rng.random((n, n)) * float(rng.choice([0.5, 1, 10]))
            res = ot.emd_exact(c)
            assert res.value == pytest.approx(permutation_oracle(c), abs=1e-9)

    def test_vertex_oracle_general_weights(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            m, n = int(rng.integers(2, 4)), int(rng.integers(2, 4))
            c = rng.random((m, n))
            a = rng.random(m) + 0.1
            a /= a.sum()
            b = rng.random(n) + 0.1
            b /= b.sum()
            res = ot.emd_exact(c, a, b)
            assert res.value == pytest.approx(vertex_oracle(c, a, b), abs=1e-7)

    def test_feasibility(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            c = rng.random((5, 7))
            res = ot.emd_exact(c)
            assert res.plan.marginal_violation() <= 1e-9
            assert res.plan.flows.min() >= 0.0

    def test_dual_certificate(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            c = rng.random((6, 4))
            res = ot.emd_exact(c)
            slack = c - res.u[:, None] - res.v[None, :]
            assert slack.min() >= -1e-8
            support = res.plan.flows > 1e-12
            if support.any():
                assert np.abs(slack[support]).max() <= 1e-8

    def test_value_matches_plan_recomputation(self):
        rng = np.random.default_rng(5)
        c = rng.random((4, 5))
        res = ot.emd_exact(c)
        assert res.value == pytest.approx(float((res.plan.flows * c).sum()), abs=1e-9)

    def test_beats_random_feasible_plans(self):
        rng = np.random.default_rng(6)
        c = rng.random((5, 6))
        a = np.full(5, 0.2)
        b = np.full(6, 1 / 6)
        res = ot.emd_exact(c, a, b)
        for _ in range(1000):
            p = random_feasible_plan(rng, a, b)
            assert res.value <= float((p * c).sum()) + 1e-9

    def test_positive_homogeneity(self):
        rng = np.random.default_rng(8)
        c = rng.random((4, 4))
        base = ot.emd_exact(c).value
        for alpha in (0.5, 2.0, 10.0):
            assert ot.emd_exact(alpha * c).value == pytest.approx(alpha * base, abs=1e-9)

    def test_metric_axioms(self):
        rng = np.random.default_rng(9)
        for _ in range(5):
            x = rng.normal(size=(4, 3))
            y = rng.normal(size=(4, 3))
            z = rng.normal(size=(4, 3))
            dxx = ot.emd_exact(ot.cost_matrix(x, x)).value
            dxy = ot.emd_exact(ot.cost_matrix(x, y)).value
            dyx = ot.emd_exact(ot.cost_matrix(y, x)).value
            dxz = ot.emd_exact(ot.cost_matrix(x, z)).value
            dyz = ot.emd_exact(ot.cost_matrix(y, z)).value
            assert dxx == pytest.approx(0.0, abs=1e-9)
            assert dxy == pytest.approx(dyx, abs=1e-9)
            assert dxz <= dxy + dyz + 1e-9

    def test_degenerate_single_row(self):
        c = np.array([[1.0, 3.0]])
        res = ot.emd_exact(c, np.array([1.0]), np.array([0.25, 0.75]))
        assert res.value == pytest.approx(0.25 * 1 + 0.75 * 3)

    def test_empty_rejected(self):
        with pytest.raises(ot.OtError):
            ot.emd_exact(np.zeros((0, 0)))

    def test_nonfinite_cost_rejected(self):
        with pytest.raises(ot.OtError):
            ot.emd_exact(np.array([[np.inf]]))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_random_instances_feasible_and_optimal(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 5))
        c = rng.random((n, n))
        res = ot.emd_exact(c)
        assert res.plan.marginal_violation() <= 1e-9
        assert res.value == pytest.approx(permutation_oracle(c), abs=1e-9)


class TestSinkhorn:
    def test_point_masses_small_eps(self):
        c = np.array([[3.0, 5.0], [5.0, 3.0]])
        res = ot.emd_sinkhorn(c, eps=0.01 * c.mean())
        assert res.value == pytest.approx(3.0, rel=0.05)

    def test_identical_distributions_bound(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(5, 3))
        c = ot.cost_matrix(a, a)
        eps = 0.01 * float(c.values.mean())
        res = ot.emd_sinkhorn(c, eps=eps)
        assert res.value <= eps * np.log(25) + 1e-6 * c.values.max()

    def test_error_non_increasing_in_eps(self):
        rng = np.random.default_rng(3)
        c = rng.random((6, 5))
        exact = ot.emd_exact(c).value
        errs = []
        for scale in (1.0, 0.3, 0.1, 0.03):
            res = ot.emd_sinkhorn(c, eps=scale * float(c.mean()))
            errs.append(abs(res.value - exact))
        assert all(errs[k + 1] <= errs[k] + 1e-9 for k in range(len(errs) - 1))

    def test_rounded_plan_feasible(self):
        rng = np.random.default_rng(4)
        c = rng.random((5, 7))
        res = ot.emd_sinkhorn(c, eps=0.1)
        assert res.plan.marginal_violation() <= 1e-6
        assert res.plan.flows.min() >= 0.0

    def test_nonconvergence_flagged(self):
        rng = np.random.default_rng(5)
        c = rng.random((4, 4))
        res = ot.emd_sinkhorn(c, eps=1e-4, max_iter=3)
        assert not res.converged

    def test_bad_eps_rejected(self):
        with pytest.raises(ot.OtError):
            ot.emd_sinkhorn(np.ones((2, 2)), eps=0.0)


class TestReward:
    def test_definition(self):
        assert ot.reward(0.5) == pytest.approx(2.0, rel=1e-6)

    def test_zero_emd_floor(self):
        assert ot.reward(0.0) == pytest.approx(1e9)

    def test_negative_rejected(self):
        with pytest.raises(ot.OtError):
            ot.reward(-0.1)

    def test_scaling_inverts(self):
        rng = np.random.default_rng(6)
        c = rng.random((4, 4)) + 0.5
        v1 = ot.emd_exact(c).value
        v2 = ot.emd_exact(2.0 * c).value
        assert v2 == pytest.approx(2.0 * v1, abs=1e-9)
        assert ot.reward(v2) == pytest.approx(ot.reward(v1) / 2.0, rel=1e-6)

    @given(st.floats(0.0, 1e6), st.floats(0.0, 1e6))
    def test_strictly_decreasing(self, x, y):
        if x < y:
            # differences below the 1e-9 floor are not resolvable in float64
            assert ot.reward(x) >= ot.reward(y)
            if y - x > 1e-6:
                assert ot.reward(x) > ot.reward(y)
