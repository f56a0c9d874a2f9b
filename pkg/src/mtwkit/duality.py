"""Discrete Kantorovich duality for the maximization problem.

Convention: the plan maximizes sum(pi * c) and the dual potentials live in
K = {(u, v) : u(x) + v(y) >= c(x, y)}, minimizing sum(f u) + sum(g v).
"""

from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.special import logsumexp

from . import cost_models as costs
from .cost_models import CostModel
from .errors import MassImbalance, NonConvergence, NotCConvex, OracleTooLarge

ARG_TOL = 1e-10
CONVEX_TOL = 1e-10
MASS_RTOL = 1e-9
DEFAULT_ORACLE_MAX = 400


def oracle_max() -> int:
    return int(os.environ.get("MTW_ORACLE_MAX", DEFAULT_ORACLE_MAX))


@dataclass
class WeightedCloud:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim == 1:
            self.points = self.points[:, None]
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.weights) != len(self.points):
            raise ValueError("one weight per point is required")
        if np.any(self.weights < 0) or not self.weights.sum() > 0:
            raise ValueError("weights must be nonnegative with positive total")

    @property
    def mass(self) -> float:
        return float(self.weights.sum())


@dataclass
class TransportPlan:
    coupling: np.ndarray
    value: float


@dataclass
class DiscretePotentialPair:
    u: np.ndarray
    v: np.ndarray


@dataclass
class DualResult:
    plan: TransportPlan
    potentials: DiscretePotentialPair
    info: dict = field(default_factory=dict)


def cost_matrix(model: CostModel, X, Y) -> np.ndarray:
    """C[i, j] = c(X[i], Y[j]); raises DomainViolation on inadmissible pairs."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    return np.asarray(costs.evaluate(model, X[:, None, :], Y[None, :, :]))


# --------------------------------------------------------------------------
# Transforms

def _sup(values, axis):
    """Max along ``axis`` with the lowest index winning ties."""
    idx = np.argmax(values, axis=axis)
    return np.max(values, axis=axis), idx


def c_transform(model: CostModel, u, X, Y, return_argmax: bool = False):
    """v(y) = max over x in X of c(x, y) - u(x)."""
    C = cost_matrix(model, X, Y)
    v, idx = _sup(C - np.asarray(u, float)[:, None], axis=0)
    return (v, idx) if return_argmax else v


def c_star_transform(model: CostModel, v, X, Y, return_argmax: bool = False):
    """u(x) = max over y in Y of c(x, y) - v(y)."""
    C = cost_matrix(model, X, Y)
    u, idx = _sup(C - np.asarray(v, float)[None, :], axis=1)
    return (u, idx) if return_argmax else u


def c_convexify(model: CostModel, u, X, Y) -> np.ndarray:
    """The c-convex envelope (u^c)^{c*} of u computed through the target cloud."""
    C = cost_matrix(model, X, Y)
    v = np.max(C - np.asarray(u, float)[:, None], axis=0)
    return np.max(C - v[None, :], axis=1)


def is_c_convex(model: CostModel, u, X, Y, tol: float = CONVEX_TOL):
    """(flag, defect) with defect = max |u - c_convexify(u)|."""
    u = np.asarray(u, dtype=float)
    defect = float(np.max(np.abs(u - c_convexify(model, u, X, Y))))
    return defect <= tol, defect


def _normal_sets(model, u, X, Y, arg_tol):
    ok, defect = is_c_convex(model, u, X, Y)
    if not ok:
        raise NotCConvex(f"potential is not c-convex (defect {defect:.3e})")
    C = cost_matrix(model, X, Y)
    v = np.max(C - np.asarray(u, float)[:, None], axis=0)
    score = C - v[None, :]
    best = np.max(score, axis=1, keepdims=True)
    return score >= best - arg_tol


def c_normal_map(model: CostModel, u, X, Y, x0: int, arg_tol: float = ARG_TOL) -> list:
    """Indices of all y attaining max_y {c(x0, y) - v(y)} within ``arg_tol``."""
    sets = _normal_sets(model, u, X, Y, arg_tol)
    return [int(j) for j in np.nonzero(sets[x0])[0]]


def ma_measure(model: CostModel, u, X, Y, g_weights, cell, arg_tol: float = ARG_TOL) -> float:
    """g-mass of the targets in the c-normal image of ``cell`` (indices into X).

    A target reached from several source nodes belongs to the lowest-index
    one, which makes the measure additive over disjoint cells.
    """
    cell = np.asarray(list(cell), dtype=int)
    if cell.size == 0:
        return 0.0
    sets = _normal_sets(model, u, X, Y, arg_tol)
    reached = np.any(sets, axis=0)
    owner = np.argmax(sets, axis=0)
    mine = reached & np.isin(owner, cell)
    return float(np.sum(np.asarray(g_weights, float)[mine]))


# --------------------------------------------------------------------------
# Oracle

def _check_balance(source, target):
    mass = max(source.mass, target.mass)
    if abs(source.mass - target.mass) > MASS_RTOL * mass:
        raise MassImbalance(f"source mass {source.mass:.12g} != target mass {target.mass:.12g}")


def _tree_duals(C, support, u_seed, v_seed):
    """Exact duals on the support graph: u_i + v_j = C_ij along its edges.

    Each connected component keeps the offset of its root from the seed
    duals, so components that the support does not link stay consistent.
    """
    m, n = C.shape
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    rows, cols = np.nonzero(support)
    adj_r = [[] for _ in range(m)]
    adj_c = [[] for _ in range(n)]
    for i, j in zip(rows, cols):
        adj_r[i].append(j)
        adj_c[j].append(i)
    for start in range(m):
        if not np.isnan(u[start]):
            continue
        u[start] = u_seed[start]
        queue = deque([("r", start)])
        while queue:
            kind, k = queue.popleft()
            if kind == "r":
                for j in adj_r[k]:
                    if np.isnan(v[j]):
                        v[j] = C[k, j] - u[k]
                        queue.append(("c", j))
            else:
                for i in adj_c[k]:
                    if np.isnan(u[i]):
                        u[i] = C[i, k] - v[k]
                        queue.append(("r", i))
    v = np.where(np.isnan(v), v_seed, v)
    return u, v


def _exact_lp(C, f, g):
    m, n = C.shape
    rows = sparse.kron(sparse.eye(m), np.ones((1, n)))
    cols = sparse.kron(np.ones((1, m)), sparse.eye(n))
    A = sparse.vstack([rows, cols]).tocsr()
    b = np.concatenate([f, g])
    res = linprog(-C.ravel(), A_eq=A, b_eq=b, bounds=(0, None), method="highs",
                  options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        raise NonConvergence(f"LP solver failed: {res.message}")
    pi = np.clip(res.x.reshape(m, n), 0.0, None)
    marg = -np.asarray(res.eqlin.marginals)
    u_seed, v_seed = marg[:m], marg[m:]
    mass = f.sum()
    support = pi > 1e-12 * mass
    u, v = _tree_duals(C, support, u_seed, v_seed)
    slack = u[:, None] + v[None, :] - C
    tol = 1e-9 * max(1.0, np.abs(C).max())
    route = "support_tree"
    if slack.min() < -tol:
        u, v, route = u_seed, v_seed, "solver_marginals"
    # one c-transform pass removes any residual infeasibility without moving support slack
    v = np.max(C - u[:, None], axis=0)
    return pi, u, v, route


def _sinkhorn(C, f, g, eps, max_iter, tol):
    logf, logg = np.log(f), np.log(g)
    u = np.zeros(len(f))
    v = np.zeros(len(g))
    mass = f.sum()
    for it in range(1, max_iter + 1):
        u = eps * (logsumexp((C - v[None, :]) / eps, axis=1) - logf)
        v = eps * (logsumexp((C - u[:, None]) / eps, axis=0) - logg)
        pi = np.exp((C - u[:, None] - v[None, :]) / eps)
        err = np.abs(pi.sum(axis=1) - f).sum()
        if err <= tol * mass:
            return pi, u, v, it
    raise NonConvergence(f"Sinkhorn did not reach marginal error {tol:g} in {max_iter} iterations")


def solve_dual_discrete(model: CostModel, source: WeightedCloud, target: WeightedCloud,
                        method: str = "exact_lp", eps: float = 1e-2, max_iter: int = 20000,
                        tol: float = 1e-9) -> DualResult:
    """Optimal plan and dual potentials for maximizing sum(pi * c).

    ``exact_lp`` uses the HiGHS LP solver and then recomputes the duals exactly
    along the support of the plan; ``entropic`` runs log-domain Sinkhorn
    with regularization ``eps``.
    """
    _check_balance(source, target)
    f = source.weights
    g = target.weights * (source.mass / target.mass)
    C = cost_matrix(model, source.points, target.points)
    info = {"method": method, "sign_convention": "maximize sum(pi c); u + v >= c",
            "n_source": len(f), "n_target": len(g)}
    if method == "exact_lp":
        limit = oracle_max()
        if max(len(f), len(g)) > limit:
            raise OracleTooLarge(f"cloud size exceeds oracle_max = {limit}")
        pi, u, v, route = _exact_lp(C, f, g)
        info["dual_route"] = route
    elif method == "entropic":
        if not eps > 0:
            raise ValueError("eps must be positive")
        pi, u, v, iters = _sinkhorn(C, f, g, eps, max_iter, tol)
        info.update(eps=eps, iterations=iters,
                    suboptimality_bound=float(eps * source.mass * np.log(len(f) * len(g))))
    else:
        raise ValueError(f"unknown method {method!r}")
    value = float(np.sum(pi * C))
    info["dual_value"] = float(f @ u + g @ v)
    info["primal_value"] = value
    return DualResult(TransportPlan(pi, value), DiscretePotentialPair(u, v), info)


def complementary_slackness(C, plan: TransportPlan, pot: DiscretePotentialPair, support_tol=1e-12):
    """(max slack on the support, min slack overall)."""
    slack = pot.u[:, None] + pot.v[None, :] - C
    on = plan.coupling > support_tol * plan.coupling.sum()
    return float(np.max(np.abs(slack[on]))), float(slack.min())
