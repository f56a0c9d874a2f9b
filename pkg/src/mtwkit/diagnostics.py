"""Checkable identities and monitored quantities on solved fields.

All field diagnostics are computed from the mean-zero representative of u,
so they are invariant under u -> u + const.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator

from . import cost_models as costs
from .errors import EllipticityLost, ImageEscapesTarget
from .pde_solver import PotentialField, ProblemSpec, field_from_u
from .stencils import Stencils

URBAS_TOL = 0.1
BETA_GAMMA_MIN = 0.0


@dataclass
class DiagnosticsReport:
    mass_gap: float
    pushforward_error: float
    min_beta_dot_gamma: float
    urbas_residual: float
    min_eig_w: float
    sup_D2u: float
    cost_value: float
    thresholds: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.flags.values())

    def values(self):
        return {"mass_gap": self.mass_gap, "pushforward_error": self.pushforward_error,
                "min_beta_dot_gamma": self.min_beta_dot_gamma, "urbas_residual": self.urbas_residual,
                "min_eig_w": self.min_eig_w, "sup_D2u": self.sup_D2u, "cost_value": self.cost_value}

    def to_dict(self):
        return {**{k: float(v) for k, v in self.values().items()},
                "thresholds": self.thresholds, "flags": self.flags, "passed": self.passed}

    def summary(self) -> str:
        lines = []
        for k, v in self.values().items():
            flag = self.flags.get(k)
            mark = "" if flag is None else ("ok" if flag else "FAIL")
            lines.append(f"{k:<22}{v:>16.6e}  {mark}")
        return "\n".join(lines)


def mass_balance(f_values, f_weights, g_values, g_weights) -> float:
    """|sum f w - sum g w*| by the node quadratures of both domains."""
    return float(abs(np.dot(f_values, f_weights) - np.dot(g_values, g_weights)))


def _normalized(problem, fld, stencils):
    u = fld.u - np.average(fld.u, weights=problem.omega.weights)
    return field_from_u(problem, u, stencils)


def _fine_samples(domain, sub):
    """Quadrature points and weights at spacing h / sub inside the domain."""
    h = domain.h / sub
    n = domain.dim
    lo = domain.nodes.min(axis=0)
    hi = domain.nodes.max(axis=0)
    axes = [np.arange(lo[k] + 0.5 * h, hi[k], h) for k in range(n)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    pts = pts[domain.distance(pts) > 0]
    w = np.full(len(pts), domain.volume / len(pts))
    return pts, w


def _interpolate_map(nodes, T, pts):
    if nodes.shape[-1] == 1:
        order = np.argsort(nodes[:, 0])
        return np.interp(pts[:, 0], nodes[order, 0], T[order, 0])[:, None]
    lin = LinearNDInterpolator(nodes, T)(pts)
    miss = ~np.all(np.isfinite(lin), axis=-1)
    if np.any(miss):
        lin[miss] = NearestNDInterpolator(nodes, T)(pts[miss])
    return lin


def _cells(points, lo, hi, k):
    idx = np.floor((points - lo) / (hi - lo) * k).astype(int)
    idx = np.clip(idx, 0, k - 1)
    return np.ravel_multi_index(idx.T, (k,) * points.shape[-1])


def pushforward_error(problem: ProblemSpec, fld: PotentialField, cells_per_axis: int = 8,
                      sub: int = 4) -> float:
    """Max relative cell discrepancy between T#(f) and g over a partition of Omega*.

    The target bounding box is cut into ``cells_per_axis**n`` cells clipped
    to Omega*; both measures are integrated on fine sub-grids, with T
    interpolated linearly between nodes.  The discrepancy of a cell is
    divided by the larger of its g-mass and the mean cell mass.
    """
    om, os_ = problem.omega, problem.omega_star
    T = fld.T
    escape = -os_.distance(T)
    if np.max(escape) > 2 * om.h:
        raise ImageEscapesTarget(f"T leaves the target by {np.max(escape):.3e} > 2h")
    xs, wx = _fine_samples(om, sub)
    ty = _interpolate_map(om.nodes, T, xs)
    ys, wy = _fine_samples(os_, sub)
    lo, hi = os_.nodes.min(axis=0), os_.nodes.max(axis=0)
    k = cells_per_axis
    ncell = k ** om.dim
    src = np.bincount(_cells(ty, lo, hi, k), weights=problem.f(xs) * wx, minlength=ncell)
    dst = np.bincount(_cells(ys, lo, hi, k), weights=problem.g(ys) * wy, minlength=ncell)
    # the fine quadratures carry their own small mass mismatch; compare shapes
    src *= dst.sum() / src.sum()
    used = (dst > 0) | (src > 0)
    scale = np.maximum(dst[used], dst[used].mean())
    return float(np.max(np.abs(src[used] - dst[used]) / scale))


def _boundary_terms(problem, fld):
    Ni = problem.omega.n_interior
    T = fld.T[Ni:]
    b = costs.derivative_bundle(problem.model, problem.omega.boundary_nodes, T, order=2, strict=False)
    w = fld.w[Ni:]
    if np.any(np.linalg.eigvalsh(w)[:, 0] <= 0):
        raise EllipticityLost("w is not positive definite at a boundary node")
    phi_grad = problem.omega_star.phi_grad(T)
    beta = np.einsum("pi,pik->pk", phi_grad, b.c_xy_inv)
    return beta, problem.omega.normals, w


def obliqueness(problem: ProblemSpec, fld: PotentialField):
    """(min beta.gamma, per-node beta.gamma) with beta_k = phi*_i c^{i,k} at T(x)."""
    beta, gamma, _ = _boundary_terms(problem, fld)
    bg = np.einsum("pk,pk->p", beta, gamma)
    return float(bg.min()), bg


def urbas_identity_residual(problem: ProblemSpec, fld: PotentialField, per_node: bool = False):
    """max |(beta.gamma)^2 - (gamma^T w^{-1} gamma)(beta^T w beta)| over boundary nodes."""
    beta, gamma, w = _boundary_terms(problem, fld)
    lhs = np.einsum("pk,pk->p", beta, gamma) ** 2
    winv = np.linalg.inv(w)
    rhs = np.einsum("pi,pij,pj->p", gamma, winv, gamma) * np.einsum("pk,pkl,pl->p", beta, w, beta)
    res = np.abs(lhs - rhs)
    return (float(res.max()), res) if per_node else float(res.max())


def ellipticity_margin(fld: PotentialField) -> float:
    return fld.min_eig_w


def second_derivative_norm(fld: PotentialField) -> float:
    return float(np.max(np.abs(np.linalg.eigvalsh(fld.D2u))))


def cost_value(model, weights_f, X=None, T=None, plan=None, C=None) -> float:
    """sum f_i c(x_i, T(x_i)) (map form) or sum pi c (plan form)."""
    if plan is not None:
        return float(np.sum(plan * C))
    return float(np.dot(weights_f, costs.evaluate(model, X, T)))


def diagnose(problem: ProblemSpec, fld: PotentialField, stencils: Stencils | None = None,
             urbas_tol: float = URBAS_TOL) -> DiagnosticsReport:
    fld = _normalized(problem, fld, stencils)
    om, os_ = problem.omega, problem.omega_star
    fw = problem.f(om.nodes) * om.weights
    mass = float(fw.sum())
    gap = mass_balance(problem.f(om.nodes), om.weights, problem.g(os_.nodes), os_.weights)
    try:
        push = pushforward_error(problem, fld)
    except ImageEscapesTarget:
        push = float("inf")
    bg, _ = obliqueness(problem, fld)
    urbas = urbas_identity_residual(problem, fld)
    report = DiagnosticsReport(gap, push, bg, urbas, ellipticity_margin(fld),
                               second_derivative_norm(fld),
                               cost_value(problem.model, fw, om.nodes, fld.T))
    report.thresholds = {"mass_gap": 1e-9 * mass, "pushforward_error": 2 * om.h,
                         "min_beta_dot_gamma": BETA_GAMMA_MIN, "urbas_residual": urbas_tol,
                         "min_eig_w": 0.0}
    report.flags = {"mass_gap": gap <= 1e-9 * mass, "pushforward_error": push <= 2 * om.h,
                    "min_beta_dot_gamma": bg > BETA_GAMMA_MIN, "urbas_residual": urbas <= urbas_tol,
                    "min_eig_w": report.min_eig_w > 0}
    return report
