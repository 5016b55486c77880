import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wassedit.exact import exact_ot_assignment, exact_ot_permutation
from wassedit.sinkhorn import SinkhornConfig, WeightedPointCloud, sinkhorn_ot, squared_euclidean_cost

U = WeightedPointCloud.uniform


@pytest.mark.parametrize("solver", [exact_ot_permutation, exact_ot_assignment])
def test_identical_clouds(solver):
    x = np.random.default_rng(0).normal(size=(5, 2))
    res = solver(U(x), U(x))
    assert res.value == 0.0
    assert np.allclose(np.diag(res.plan), 1 / 5)


def test_crossing_pair():
    res = exact_ot_permutation(U([[0.0, 0.0], [1.0, 0.0]]), U([[1.0, 0.0], [0.0, 0.0]]))
    assert res.value == 0.0
    assert res.method == "permutation"


def test_single_point_assignment():
    cost = np.array([[3.25]])
    assert exact_ot_assignment(U([[0.0]]), U([[1.0]]), cost).value == 3.25


def test_permuted_clouds_have_zero_cost():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(30, 3))
    res = exact_ot_assignment(U(x), U(x[rng.permutation(30)]))
    assert res.value == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 8), dim=st.integers(1, 4))
def test_oracles_agree(seed, n, dim):
    rng = np.random.default_rng(seed)
    a, b = U(rng.normal(size=(n, dim))), U(rng.normal(size=(n, dim)))
    perm, assign = exact_ot_permutation(a, b), exact_ot_assignment(a, b)
    assert abs(perm.value - assign.value) <= 1e-10
    for res in (perm, assign):
        # scaled permutation matrix with exact marginals
        assert np.all(np.isin(res.plan, [0.0, 1.0 / n]))
        assert np.abs(res.plan.sum(axis=0) - 1.0 / n).max() <= 1e-12
        assert np.abs(res.plan.sum(axis=1) - 1.0 / n).max() <= 1e-12
        assert res.value == pytest.approx(float((res.plan * squared_euclidean_cost(a, b)).sum()))


def test_exact_bounds_every_permutation_and_sinkhorn_plan():
    rng = np.random.default_rng(2)
    a, b = U(rng.random((5, 2))), U(rng.random((5, 2)))
    cost = squared_euclidean_cost(a, b)
    exact = exact_ot_assignment(a, b, cost).value
    for perm in itertools.permutations(range(5)):
        assert exact <= cost[np.arange(5), perm].mean() + 1e-15
    assert exact <= sinkhorn_ot(a, b, cost, SinkhornConfig(epsilon=0.05)).value + 1e-12


def test_rejections():
    a3, a2 = U(np.zeros((3, 1))), U(np.zeros((2, 1)))
    with pytest.raises(ValueError, match="equal sizes"):
        exact_ot_assignment(a3, a2)
    with pytest.raises(ValueError, match="limit"):
        exact_ot_permutation(U(np.arange(9.0)[:, None]), U(np.arange(9.0)[:, None]))
    skewed = WeightedPointCloud(np.zeros((2, 1)), [0.3, 0.7])
    with pytest.raises(ValueError, match="uniform"):
        exact_ot_assignment(skewed, U(np.zeros((2, 1))))
