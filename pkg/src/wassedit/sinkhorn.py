"""Log-domain Sinkhorn solver and the debiased Sinkhorn divergence.

All solves work on scaled potentials ``u = f / eps`` and ``v = g / eps`` so
that every update is a plain log-sum-exp over ``-cost / eps``. The kernel
form ``exp(-cost / eps)`` is never materialized, which keeps small values of
``eps`` usable.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

__all__ = [
    "WeightedPointCloud",
    "SinkhornConfig",
    "SinkhornResult",
    "ConvergenceError",
    "squared_euclidean_cost",
    "attribute_space_cost",
    "sinkhorn_ot",
    "sinkhorn_divergence",
    "divergence_gradient",
    "gradient_from_result",
]


class ConvergenceError(RuntimeError):
    """Raised when a computation requires converged potentials and did not get them."""


@dataclass(frozen=True)
class WeightedPointCloud:
    """``n`` points in ``R^dim`` carrying a probability vector."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        if points.ndim == 1:
            points = points[None, :]
        if points.ndim != 2 or points.shape[0] < 1 or points.shape[1] < 1:
            raise ValueError(f"points must be a non-empty 2-D array, got shape {points.shape}")
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if weights.shape[0] != points.shape[0]:
            raise ValueError(
                f"{weights.shape[0]} weights for {points.shape[0]} points"
            )
        if not (np.all(np.isfinite(points)) and np.all(np.isfinite(weights))):
            raise ValueError("point cloud contains NaN or Inf")
        if np.any(weights <= 0):
            raise ValueError("weights must be strictly positive; drop zero-mass points first")
        if abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {weights.sum():.12g}, expected 1")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, points) -> WeightedPointCloud:
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points[None, :]
        n = points.shape[0]
        return cls(points, np.full(n, 1.0 / n))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class SinkhornConfig:
    """Solver settings.

    ``epsilon=None`` resolves to ``relative_epsilon * mean(cost)`` of the
    problem being solved (for a divergence: of the cross cost, shared by the
    two self-transport terms). ``annealing=None`` switches epsilon-scaling on
    automatically when the resolved epsilon is at most ``1e-3 * mean(cost)``.
    ``tolerance`` bounds the sup-norm of successive updates of ``f / eps`` and
    ``g / eps``. ``relaxation`` is the over-relaxation factor of the
    alternating updates (1 gives plain Sinkhorn); self-transport problems
    always use the averaged symmetric update.
    """

    epsilon: float | None = None
    max_iters: int = 2000
    tolerance: float = 1e-6
    annealing: bool | None = None
    relative_epsilon: float = 0.05
    annealing_factor: float = 0.5
    relaxation: float = 1.0

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not self.tolerance > 0:
            raise ValueError(f"tolerance must be positive, got {self.tolerance}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.relative_epsilon > 0:
            raise ValueError("relative_epsilon must be positive")
        if not 0 < self.annealing_factor < 1:
            raise ValueError("annealing_factor must lie in (0, 1)")
        if not 1.0 <= self.relaxation < 2.0:
            raise ValueError("relaxation must lie in [1, 2)")

    def resolve_epsilon(self, cost: np.ndarray) -> float:
        if self.epsilon is not None:
            return float(self.epsilon)
        scale = float(np.mean(cost))
        if scale <= 0:
            # all points coincide; any positive value gives the same plan
            return 1.0
        return self.relative_epsilon * scale

    def replace(self, **changes) -> SinkhornConfig:
        return dataclasses.replace(self, **changes)


@dataclass
class SinkhornResult:
    value: float
    f: np.ndarray
    g: np.ndarray
    plan: np.ndarray
    iters_used: int
    converged: bool
    epsilon: float
    # entropic objective <a, f> + <b, g>; `value` is the primal cost for a
    # single solve and the divergence for sinkhorn_divergence
    regularized_value: float = 0.0
    self_source: SinkhornResult | None = field(default=None, repr=False)
    self_target: SinkhornResult | None = field(default=None, repr=False)


def squared_euclidean_cost(src, tgt) -> np.ndarray:
    """Cost matrix ``c_ij = 0.5 * ||x_i - y_j||^2``.

    Accepts point clouds or raw ``(n, dim)`` arrays.
    """
    x = _as_points(src)
    y = _as_points(tgt)
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    sq = (
        0.5 * np.einsum("ij,ij->i", x, x)[:, None]
        + 0.5 * np.einsum("ij,ij->i", y, y)[None, :]
        - x @ y.T
    )
    np.maximum(sq, 0.0, out=sq)
    if x is y or (x.shape == y.shape and np.array_equal(x, y)):
        np.fill_diagonal(sq, 0.0)
        sq = 0.5 * (sq + sq.T)
    return sq


def attribute_space_cost(src_attrs, tgt_attrs, gamma_weights) -> np.ndarray:
    """``c_ij = 0.5 * sum_l (1 - gamma_l) * (u_il - v_jl)^2`` over classifier outputs.

    The column of the edited attribute must already be removed; ``gamma_weights``
    holds its correlations with the remaining attributes.
    """
    u = np.atleast_2d(np.asarray(src_attrs, dtype=float))
    v = np.atleast_2d(np.asarray(tgt_attrs, dtype=float))
    gamma = np.asarray(gamma_weights, dtype=float).reshape(-1)
    if u.shape[1] != v.shape[1] or u.shape[1] != gamma.shape[0]:
        raise ValueError(
            f"attribute dimension mismatch: {u.shape[1]}, {v.shape[1]}, {gamma.shape[0]} weights"
        )
    if np.any(gamma < 0) or np.any(gamma > 1):
        raise ValueError("gamma weights must lie in [0, 1]")
    scale = np.sqrt(1.0 - gamma)
    return squared_euclidean_cost(u * scale, v * scale)


def _as_points(obj) -> np.ndarray:
    if isinstance(obj, WeightedPointCloud):
        return obj.points
    arr = np.asarray(obj, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr


def _lse(neg_c, h, axis, buf):
    """``log sum exp(neg_c + h)`` along ``axis`` into a reusable buffer.

    ``h`` runs along ``axis``. When ``neg_c <= 0`` and ``h`` is moderate the
    unshifted exponentials neither overflow nor vanish, so the max-subtraction
    pass is skipped; otherwise the stabilized form is used.
    """
    hb = h[None, :] if axis == 1 else h[:, None]
    np.add(neg_c, hb, out=buf)
    if h.max() < 700.0:
        s = np.exp(buf, out=buf).sum(axis=axis)
        if s.min() > 1e-280 and np.all(np.isfinite(s)):
            return np.log(s)
        np.add(neg_c, hb, out=buf)
    zmax = buf.max(axis=axis)
    buf -= zmax[:, None] if axis == 1 else zmax[None, :]
    return zmax + np.log(np.exp(buf, out=buf).sum(axis=axis))


class _Kernel:
    """Scaling-domain form of the half-steps with the potentials absorbed.

    ``K = exp(neg_c + u0 + v0 + logb)`` is built once, after which each
    half-step is a matrix-vector product instead of a log-sum-exp over the
    whole matrix. A half-step returns None when the potentials have moved
    more than ``LIMIT`` from the absorbed ones or a sum is too small to
    trust; the caller then rebuilds at the current potentials.
    """

    LIMIT = 30.0
    TINY = 1e-200

    def __init__(self, neg_c, loga, logb, buf):
        self.neg_c, self.loga, self.logb, self.K = neg_c, loga, logb, buf

    def build(self, u, v) -> bool:
        K = self.K
        np.add(self.neg_c, u[:, None], out=K)
        K += (v + self.logb)[None, :]
        if not K.max() < 700.0:
            return False
        np.exp(K, out=K)
        self.u0, self.v0 = u.copy(), v.copy()
        return True

    def _log(self, s):
        if s.min() > self.TINY and np.all(np.isfinite(s)):
            return np.log(s)
        return None

    def rows(self, v):
        """``-lse_j(neg_c + v + logb)``."""
        d = v - self.v0
        if np.max(np.abs(d)) > self.LIMIT:
            return None
        ls = self._log(self.K @ np.exp(d))
        return None if ls is None else self.u0 - ls

    def cols(self, u):
        """``-lse_i(neg_c + u + loga)``."""
        d = u - self.u0
        if np.max(np.abs(d)) > self.LIMIT:
            return None
        ls = self._log(self.K.T @ np.exp(d + self.loga))
        return None if ls is None else self.v0 + self.logb - ls


class _HalfSteps:
    """Sinkhorn half-steps through ``_Kernel``, falling back to ``_lse``."""

    def __init__(self, neg_c, loga, logb, u, v):
        self.neg_c, self.loga, self.logb = neg_c, loga, logb
        self.buf = np.empty_like(neg_c)
        self.kernel = _Kernel(neg_c, loga, logb, self.buf)
        if not self.kernel.build(u, v):
            self.kernel = None

    def _via_kernel(self, name, arg, u, v):
        kernel = self.kernel
        if kernel is None:
            return None
        out = getattr(kernel, name)(arg)
        if out is None and kernel.build(u, v):
            out = getattr(kernel, name)(arg)
        if out is None:
            # the lse fallback reuses the kernel's buffer
            self.kernel = None
        return out

    def rows(self, u, v):
        out = self._via_kernel("rows", v, u, v)
        return out if out is not None else -_lse(self.neg_c, v + self.logb, 1, self.buf)

    def cols(self, u, v):
        out = self._via_kernel("cols", u, u, v)
        return out if out is not None else -_lse(self.neg_c, u + self.loga, 0, self.buf)


# An over-relaxed sweep is undone when it grows the residual by this factor.
RELAX_GROWTH = 1.5
# Stall test: every STALL_WINDOW sweeps the residual must at least halve.
STALL_WINDOW = 25


def _iterate(neg_c, loga, logb, u, v, max_iters, tol, omega=1.0, detect_stall=False):
    """Alternating scaled updates until the sup-norm change is <= tol.

    ``omega > 1`` over-relaxes each half-step, ``u <- u + omega (T(v) - u)``;
    the fixed point is unchanged and the stopping test uses the plain
    update ``T(v) - u``. The first sweep is always plain, and a relaxed
    sweep that grows the residual is undone, after which sweeps stay plain.
    With ``detect_stall`` the loop returns early once progress becomes
    too slow; the last return value flags that case.
    """
    converged = stalled = False
    it = 0
    steps = _HalfSteps(neg_c, loga, logb, u, v)
    prev = checkpoint = np.inf
    w = 1.0
    while it < max_iters:
        it += 1
        u_old, v_old = u, v
        du = steps.rows(u, v) - u
        u = u + w * du
        dv = steps.cols(u, v) - v
        v = v + w * dv
        err = max(np.max(np.abs(du)), np.max(np.abs(dv)))
        if w > 1.0 and err > RELAX_GROWTH * prev:
            u, v, w, omega = u_old, v_old, 1.0, 1.0
            continue
        prev = err
        if err <= tol:
            converged = True
            break
        w = omega
        if detect_stall and it % STALL_WINDOW == 0:
            if err > 0.5 * checkpoint:
                stalled = True
                break
            checkpoint = err
    return u, v, it, converged, stalled


def _iterate_symmetric(neg_c, loga, u, max_iters, tol):
    """Averaged fixed-point update for a self-transport problem (f == g)."""
    converged = False
    it = 0
    steps = _HalfSteps(neg_c, loga, loga, u, u)
    while it < max_iters:
        it += 1
        u_new = 0.5 * (u + steps.rows(u, u))
        err = np.max(np.abs(u_new - u))
        u = u_new
        if err <= tol:
            converged = True
            break
    return u, it, converged


# Newton polishing needs a dense solve of this order (the smaller side).
NEWTON_MAX_SIZE = 2500
NEWTON_MAX_POLISHES = 3


def _newton_polish(neg_c, loga, logb, u, v, max_steps=30):
    """Newton steps on the marginal residual, gauge fixed by pinning one potential.

    Plain Sinkhorn converges linearly and stalls when the kernel is close to
    block diagonal (well separated clusters at small eps); Newton restores
    fast local convergence. The row unknowns are eliminated through their
    diagonal block, leaving a symmetric positive definite system over the
    columns. Steps are damped so the residual never grows; when no damped
    step helps, the nearly singular directions are dropped through an
    eigendecomposition and the step is retried.
    """
    transpose = neg_c.shape[1] > neg_c.shape[0]
    if transpose:
        neg_c, loga, logb, u, v = neg_c.T, logb, loga, v, u
    a = np.exp(loga)
    b = np.exp(logb)

    def residual(u, v):
        # trial steps may overflow; the finiteness check below rejects them
        with np.errstate(over="ignore", invalid="ignore"):
            P = np.exp(neg_c + (u + loga)[:, None] + (v + logb)[None, :])
            return P, P.sum(axis=1) - a, P.sum(axis=0) - b

    P, r1, r2 = residual(u, v)
    norm = max(np.max(np.abs(r1)), np.max(np.abs(r2)))
    pseudo = False
    steps = 0
    while steps < max_steps and norm >= 1e-15:
        step = _newton_direction(P, r1, r2, pseudo)
        t = 1.0
        while step is not None and t > 1e-4:
            P_new, q1, q2 = residual(u + t * step[0], v + t * step[1])
            norm_new = max(np.max(np.abs(q1)), np.max(np.abs(q2)))
            if np.isfinite(norm_new) and norm_new < norm:
                break
            t *= 0.5
        else:
            if pseudo:
                break
            # several weakly coupled blocks leave more than the pinned gauge
            # nearly singular; retry with those directions projected out
            pseudo = True
            continue
        u, v, P, r1, r2, norm = u + t * step[0], v + t * step[1], P_new, q1, q2, norm_new
        steps += 1
    if transpose:
        u, v = v, u
    return u, v


def _newton_direction(P, r1, r2, pseudo):
    """Newton step ``(du, dv)`` for the marginal residual, or None if the solve fails."""
    rows = P.sum(axis=1)
    cols = P.sum(axis=0)
    if not (np.all(rows > 0) and np.all(np.isfinite(rows))):
        # a row whose mass underflowed has no usable Newton system
        return None
    scaled = P / rows[:, None]
    schur = np.diag(cols) - P.T @ scaled
    rhs = -r2 + scaled.T @ r1
    try:
        if pseudo:
            w, Q = scipy.linalg.eigh(schur)
            keep = w > 1e-12 * w[-1]
            dv = Q[:, keep] @ ((Q[:, keep].T @ rhs) / w[keep])
        else:
            with warnings.catch_warnings():
                # near-permutation plans give ill-conditioned but usable systems
                warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
                dv = np.append(scipy.linalg.solve(schur[:-1, :-1], rhs[:-1], assume_a="pos"), 0.0)
    except (np.linalg.LinAlgError, ValueError):
        return None
    return (-r1 - P @ dv) / rows, dv


def _solve_stage(neg_c, loga, logb, u, v, cfg):
    can_polish = min(neg_c.shape) <= NEWTON_MAX_SIZE
    used = polishes = 0
    while True:
        u, v, k, converged, stalled = _iterate(
            neg_c, loga, logb, u, v, cfg.max_iters - used, cfg.tolerance, cfg.relaxation,
            detect_stall=can_polish and polishes < NEWTON_MAX_POLISHES,
        )
        used += k
        if converged or not stalled or used >= cfg.max_iters:
            return u, v, used, converged
        u, v = _newton_polish(neg_c, loga, logb, u, v)
        polishes += 1


def _annealing_schedule(cost, eps, cfg, warm):
    annealing = cfg.annealing
    if annealing is None:
        # inclusive with a relative margin so eps = 1e-3 * mean(cost) itself is annealed
        annealing = eps <= 1e-3 * float(np.mean(cost)) * (1 + 1e-9)
    schedule = []
    if annealing and not warm:
        stage = float(np.max(cost))
        while stage > eps:
            schedule.append(stage)
            stage *= cfg.annealing_factor
    schedule.append(eps)
    return schedule


def _is_self_problem(src, tgt, cost):
    if src is tgt:
        return cost.shape[0] == cost.shape[1] and np.array_equal(cost, cost.T)
    return (
        src.n == tgt.n
        and np.array_equal(src.points, tgt.points)
        and np.array_equal(src.weights, tgt.weights)
        and np.array_equal(cost, cost.T)
    )


def sinkhorn_ot(src: WeightedPointCloud, tgt: WeightedPointCloud, cost=None,
                cfg: SinkhornConfig | None = None, *, init=None) -> SinkhornResult:
    """Entropic OT between two weighted clouds for a given cost matrix.

    ``init`` optionally supplies ``(f, g)`` potentials to warm-start from.
    Returns the converged plan ``a_i b_j exp((f_i + g_j - c_ij) / eps)`` and
    its primal cost ``<plan, cost>``. Identical clouds with a symmetric cost
    are solved with the symmetric update, which yields ``f == g``.
    """
    cfg = cfg or SinkhornConfig()
    if cost is None:
        cost = squared_euclidean_cost(src, tgt)
    cost = np.asarray(cost, dtype=float)
    if cost.shape != (src.n, tgt.n):
        raise ValueError(f"cost has shape {cost.shape}, expected {(src.n, tgt.n)}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")

    eps = cfg.resolve_epsilon(cost)
    loga = np.log(src.weights)
    logb = np.log(tgt.weights)
    symmetric = _is_self_problem(src, tgt, cost)
    if init is not None:
        f = np.asarray(init[0], dtype=float).copy()
        g = np.asarray(init[1], dtype=float).copy()
    else:
        f = np.zeros(src.n)
        g = np.zeros(tgt.n)

    iters = 0
    converged = False
    for stage_eps in _annealing_schedule(cost, eps, cfg, init is not None):
        neg_c = np.multiply(cost, -1.0 / stage_eps)
        if symmetric:
            u, used, converged = _iterate_symmetric(
                neg_c, loga, 0.5 * (f + g) / stage_eps, cfg.max_iters, cfg.tolerance
            )
            v = u
        else:
            u, v, used, converged = _solve_stage(
                neg_c, loga, logb, f / stage_eps, g / stage_eps, cfg
            )
        iters += used
        f, g = u * stage_eps, v * stage_eps

    plan = np.exp(neg_c + (u + loga)[:, None] + (v + logb)[None, :])
    return SinkhornResult(
        value=float(np.vdot(plan, cost)),
        f=f,
        g=g,
        plan=plan,
        iters_used=iters,
        converged=converged,
        epsilon=eps,
        regularized_value=float(src.weights @ f + tgt.weights @ g),
    )


def sinkhorn_divergence(src: WeightedPointCloud, tgt: WeightedPointCloud,
                        cfg: SinkhornConfig | None = None, *, cost=None,
                        self_costs=None, init: dict | None = None,
                        target_self: SinkhornResult | None = None) -> SinkhornResult:
    """``S = OT(src, tgt) - OT(src, src) / 2 - OT(tgt, tgt) / 2`` on entropic objectives.

    The three terms use the regularized objective ``<a, f> + <b, g>`` and one
    shared epsilon. By default the cost is squared Euclidean; ``cost`` and
    ``self_costs=(c_ss, c_tt)`` override it. ``init`` may map ``"cross"``,
    ``"source"`` and ``"target"`` to ``(f, g)`` warm starts. ``target_self``
    is reused as-is for the target self-term (for a target that stays fixed
    across calls).
    """
    cfg = cfg or SinkhornConfig()
    if src.dim != tgt.dim and cost is None:
        raise ValueError(f"dimension mismatch: {src.dim} vs {tgt.dim}")
    if cost is None:
        cost = squared_euclidean_cost(src, tgt)
        c_ss = squared_euclidean_cost(src, src)
        c_tt = None if target_self is not None else squared_euclidean_cost(tgt, tgt)
    else:
        c_ss, c_tt = self_costs
    eps = cfg.resolve_epsilon(cost)
    fixed = cfg.replace(epsilon=eps)
    init = init or {}

    cross = sinkhorn_ot(src, tgt, cost, fixed, init=init.get("cross"))
    s_self = sinkhorn_ot(src, src, c_ss, fixed, init=init.get("source"))
    if target_self is not None:
        t_self = target_self
    else:
        t_self = sinkhorn_ot(tgt, tgt, c_tt, fixed, init=init.get("target"))
    value = cross.regularized_value - 0.5 * (
        s_self.regularized_value + t_self.regularized_value
    )
    return SinkhornResult(
        value=float(value),
        f=cross.f,
        g=cross.g,
        plan=cross.plan,
        iters_used=cross.iters_used + s_self.iters_used + t_self.iters_used,
        converged=cross.converged and s_self.converged and t_self.converged,
        epsilon=eps,
        regularized_value=cross.regularized_value,
        self_source=s_self,
        self_target=t_self,
    )


def gradient_from_result(result: SinkhornResult, src_points, tgt_points) -> np.ndarray:
    """Gradient of a squared-Euclidean divergence w.r.t. the source positions.

    Potentials are held fixed at the optimum (envelope theorem), so with
    ``c = 0.5 ||x - y||^2`` the cross term contributes ``sum_j P_ij (x_i - y_j)``
    and the self term, where ``x`` sits in both slots, ``-sum_j Qs_ij (x_i - x_j)``
    with ``Qs`` the symmetrized self plan.
    """
    if not result.converged or result.self_source is None:
        raise ConvergenceError(
            "divergence gradient needs converged cross and self potentials"
        )
    x = np.asarray(src_points, dtype=float)
    y = np.asarray(tgt_points, dtype=float)
    P = result.plan
    Q = result.self_source.plan
    q_sym = 0.5 * (Q + Q.T)
    # cross term: sum_j P_ij (x_i - y_j); self term: sum_j q_sym_ij (x_i - x_j)
    cross = P.sum(axis=1)[:, None] * x - P @ y
    self_term = q_sym.sum(axis=1)[:, None] * x - q_sym @ x
    return cross - self_term


def divergence_gradient(src: WeightedPointCloud, tgt: WeightedPointCloud,
                        cfg: SinkhornConfig | None = None) -> np.ndarray:
    """``dS/dx`` for the squared-Euclidean Sinkhorn divergence, shape ``(n_s, dim)``."""
    result = sinkhorn_divergence(src, tgt, cfg)
    return gradient_from_result(result, src.points, tgt.points)
