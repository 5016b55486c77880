"""Exact OT for small uniform problems, used as ground truth in tests."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .sinkhorn import WeightedPointCloud, squared_euclidean_cost

__all__ = ["ExactPlanResult", "exact_ot_permutation", "exact_ot_assignment"]

MAX_PERMUTATION_N = 8
MAX_ASSIGNMENT_N = 512


@dataclass
class ExactPlanResult:
    value: float
    plan: np.ndarray
    method: str  # "permutation" or "assignment"


def _check_uniform_square(src, tgt, cost, limit):
    if src.n != tgt.n:
        raise ValueError(f"exact OT needs equal sizes, got {src.n} and {tgt.n}")
    if src.n > limit:
        raise ValueError(f"n={src.n} exceeds the limit of {limit}")
    for name, cloud in (("source", src), ("target", tgt)):
        if not np.allclose(cloud.weights, 1.0 / cloud.n, rtol=0, atol=1e-12):
            raise ValueError(f"{name} weights are not uniform")
    if cost is None:
        cost = squared_euclidean_cost(src, tgt)
    cost = np.asarray(cost, dtype=float)
    if cost.shape != (src.n, tgt.n):
        raise ValueError(f"cost has shape {cost.shape}, expected {(src.n, tgt.n)}")
    return cost


def _permutation_plan(perm, n):
    plan = np.zeros((n, n))
    plan[np.arange(n), perm] = 1.0 / n
    return plan


def exact_ot_permutation(src: WeightedPointCloud, tgt: WeightedPointCloud,
                         cost=None) -> ExactPlanResult:
    """Brute force over all ``n!`` permutation plans (n <= 8)."""
    cost = _check_uniform_square(src, tgt, cost, MAX_PERMUTATION_N)
    n = src.n
    rows = np.arange(n)
    best_value = np.inf
    best_perm = None
    for perm in itertools.permutations(range(n)):
        value = cost[rows, perm].sum()
        if value < best_value:
            best_value = value
            best_perm = perm
    return ExactPlanResult(
        value=float(best_value / n),
        plan=_permutation_plan(np.array(best_perm), n),
        method="permutation",
    )


def exact_ot_assignment(src: WeightedPointCloud, tgt: WeightedPointCloud,
                        cost=None) -> ExactPlanResult:
    """Optimal plan through the linear assignment problem (n <= 512)."""
    cost = _check_uniform_square(src, tgt, cost, MAX_ASSIGNMENT_N)
    n = src.n
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(n, dtype=int)
    perm[rows] = cols
    return ExactPlanResult(
        value=float(cost[rows, cols].sum() / n),
        plan=_permutation_plan(perm, n),
        method="assignment",
    )
