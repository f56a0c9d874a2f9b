"""Second boundary value problem for Monge-Ampere type equations.

Solves det(D^2 u - A(x, Du)) = B(x, Du) in Omega with T(Omega) = Omega*,
T = Y(., Du), by continuation from an explicit seed.  The domain Omega is
fixed; the target defining function moves linearly from a ball fitted to
the seed image to Omega*, and a sigma-regularization e^{sigma u} is
removed geometrically at the end.

Only ball-type targets (interval, disk, ball) are supported by the solver.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import lsqr, spsolve

from . import cost_models as costs
from .cost_models import CostModel, derivative_bundle
from .errors import (BadGeometry, ContinuationStall, DomainViolation, EllipticityLost,
                     LinearSolveFailure, MassImbalance, NonConvergence, SeedFailure, StepTooSmall)
from .geometry import DomainSpec
from .polynomial import Polynomial
from .stencils import Stencils, build_stencils

log = logging.getLogger(__name__)

KAPPAS = tuple(2.0 ** -k for k in range(1, 9))
AFFINE_FRACS = (0.5, 0.25, 0.1, 0.05)
PATH = "fixed source domain, target defining function interpolated from the seed image ball"


@dataclass
class ProblemSpec:
    """Cost, domains and positive densities f on Omega and g on Omega*.

    ``mass_scale`` is the factor applied to g so that the discrete masses
    agree exactly.
    """

    model: CostModel
    omega: DomainSpec
    omega_star: DomainSpec
    f: Polynomial
    g: Polynomial
    mass_scale: float = 1.0
    mass_gap: float = 0.0

    @property
    def f_nodes(self):
        return self.f(self.omega.nodes)

    @property
    def g_nodes(self):
        return self.g(self.omega_star.nodes)


def make_problem(model, omega, omega_star, f=1.0, g=1.0, balance="rescale",
                 rescale_limit=0.05, mass_rtol=1e-9) -> ProblemSpec:
    """Build a ProblemSpec, checking positivity and mass balance.

    With ``balance="rescale"`` a relative mass gap up to ``rescale_limit``
    (quadrature error) is absorbed by scaling g; ``balance="strict"``
    raises MassImbalance for gaps above ``mass_rtol``.
    """
    f = Polynomial.from_spec(f)
    g = Polynomial.from_spec(g)
    fv, gv = f(omega.nodes), g(omega_star.nodes)
    if np.any(fv <= 0) or np.any(gv <= 0):
        raise ValueError("densities must be positive on their domains")
    mf, mg = float(fv @ omega.weights), float(gv @ omega_star.weights)
    gap = abs(mf - mg) / max(mf, mg)
    limit = rescale_limit if balance == "rescale" else mass_rtol
    if gap > limit:
        raise MassImbalance(f"relative mass gap {gap:.3e} exceeds {limit:g}")
    scale = mf / mg if balance == "rescale" else 1.0
    return ProblemSpec(model, omega, omega_star, f, g.scaled(scale), scale, gap)


@dataclass
class PotentialField:
    """A discrete potential with its derived fields at every node."""

    domain: DomainSpec
    u: np.ndarray
    h: float
    Du: np.ndarray
    D2u: np.ndarray
    w: np.ndarray
    T: np.ndarray
    eig_w: np.ndarray

    @property
    def min_eig_w(self) -> float:
        return float(self.eig_w.min())

    @property
    def elliptic(self) -> bool:
        return bool(self.min_eig_w > 0)


@dataclass
class Schedule:
    sigma0: float = 1.0
    sigma_min: float = 1e-3
    sigma_factor: float = 0.1
    dt0: float = 0.25
    shrink: float = 0.5
    grow: float = 1.5
    dt_min: float = 1e-6
    newton_max_iter: int = 25
    newton_tol: float = 1e-10
    alpha_min: float = 1e-6
    sigma_zero_polish: bool = False

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class Homotopy:
    """Data of the continuation family (seed offsets and target balls)."""

    center0: np.ndarray
    radius0: float
    center1: np.ndarray
    radius1: float
    f_offset: np.ndarray
    g_offset: np.ndarray
    sigma0: float

    def ball(self, t):
        return (1 - t) * self.center0 + t * self.center1, (1 - t) * self.radius0 + t * self.radius1


@dataclass
class SolveResult:
    field: PotentialField
    trace: list
    converged: bool
    sigma: float
    lam: float | None = None
    path: str = PATH
    seed_kind: str = ""
    notes: list = field(default_factory=list)


# --------------------------------------------------------------------------
# Pointwise evaluation

class _Evaluator:
    def __init__(self, problem: ProblemSpec, stencils: Stencils | None = None):
        if not problem.omega_star.is_ball:
            raise BadGeometry("the solver supports ball-type targets (interval, disk, ball) only")
        if problem.omega.dim != problem.omega_star.dim:
            raise BadGeometry("source and target dimensions differ")
        self.p = problem
        self.S = stencils or build_stencils(problem.omega)
        self.X = problem.omega.nodes
        self.Ni = problem.omega.n_interior
        self.N = len(self.X)
        self.n = problem.omega.dim
        self.fx = problem.f(self.X)

    def state(self, u, need_jac=True):
        """Derived fields at every node; ``ok`` is False when inadmissible."""
        p = self.p
        Du = self.S.D(u)
        D2u = self.S.D2(u)
        Y, ok = costs.solve_Y(p.model, self.X, Du, strict=False)
        st = {"u": u, "Du": Du, "D2u": D2u, "Y": Y, "ok": bool(np.all(ok))}
        if not st["ok"]:
            return st
        b = derivative_bundle(p.model, self.X, Y, order=3 if need_jac else 2, strict=False)
        if np.any(b.singular):
            st["ok"] = False
            return st
        A = 0.5 * (b.c_xx + np.swapaxes(b.c_xx, -1, -2))
        w = D2u - A
        eig = np.linalg.eigvalsh(w)
        gY = p.g(Y)
        if np.any(gY <= 0):
            st["ok"] = False
            return st
        st.update(bundle=b, A=A, w=w, eig=eig[:, 0], det=np.linalg.det(w), gY=gY,
                  B=np.abs(b.det_c_xy) * self.fx / gY)
        if need_jac:
            inv = b.c_xy_inv
            st["DpA"] = np.einsum("pabr,prk->pabk", b.c_xxy, inv)
            dlogdet = np.einsum("pki,pikr,prj->pj", inv, b.c_xyy, inv)
            dlogg = np.einsum("pr,prk->pk", p.g.grad(Y) / gY[:, None], inv)
            st["dlogB"] = dlogdet - dlogg
        return st

    def field(self, st) -> PotentialField:
        return PotentialField(self.p.omega, st["u"].copy(), self.p.omega.h, st["Du"], st["D2u"],
                              st["w"], st["Y"], st["eig"])


def _phi_ball(y, c, R):
    d = y - c
    return (np.einsum("...i,...i->...", d, d) - R * R) / (2 * R), d / R


class _System:
    """Residual and Jacobian of the continuation family at (t, sigma)."""

    def __init__(self, ev: _Evaluator, hom: Homotopy):
        self.ev = ev
        self.hom = hom

    def residual(self, st, t, sigma, lam=None):
        ev = self.ev
        Ni = ev.Ni
        u = st["u"]
        if lam is None:
            expo = sigma * u[:Ni] + (1 - t) * self.hom.f_offset
        else:
            expo = np.full(Ni, lam)
        eb = np.exp(expo) * st["B"][:Ni]
        r_int = st["det"][:Ni] - eb
        c, R = self.hom.ball(t)
        phi, grad = _phi_ball(st["Y"][Ni:], c, R)
        r_bnd = phi - (1 - t) * self.hom.g_offset
        st["EB"] = eb
        st["phi_grad"] = grad
        return np.concatenate([r_int, r_bnd])

    def beta(self, st):
        inv = st["bundle"].c_xy_inv[self.ev.Ni:]
        return np.einsum("pr,prk->pk", st["phi_grad"], inv)

    def jacobian(self, st, sigma, lam=None):
        ev = self.ev
        S, Ni, N, n = ev.S, ev.Ni, ev.N, ev.n
        det = st["det"][:Ni]
        winv = np.linalg.inv(st["w"][:Ni])
        eb = st["EB"]
        J = sparse.csr_matrix((Ni, N))
        for (a, b), H in S.hess.items():
            coef = det * (winv[:, b, a] if a == b else winv[:, b, a] + winv[:, a, b])
            J = J + sparse.diags(coef) @ H[:Ni]
        Ck = det[:, None] * np.einsum("pba,pabk->pk", winv, st["DpA"][:Ni]) + eb[:, None] * st["dlogB"][:Ni]
        for k in range(n):
            J = J - sparse.diags(Ck[:, k]) @ S.grad[k][:Ni]
        if lam is None and sigma != 0:
            J = J - sparse.diags(sigma * eb, 0, shape=(Ni, N))
        beta = self.beta(st)
        Jb = sparse.csr_matrix((N - Ni, N))
        for k in range(n):
            Jb = Jb + sparse.diags(beta[:, k]) @ S.grad[k][Ni:]
        J = sparse.vstack([J, Jb]).tocsr()
        if lam is not None:
            col = sparse.csr_matrix(np.concatenate([-eb, np.zeros(N - Ni)])[:, None])
            wrow = np.concatenate([ev.p.omega.weights, [0.0]])[None, :]
            J = sparse.vstack([sparse.hstack([J, col]), sparse.csr_matrix(wrow)]).tocsr()
        return J


# --------------------------------------------------------------------------
# Newton

def _acceptable(st):
    return st["ok"] and np.all(st["eig"] > 0)


def _newton(system: _System, u, t, sigma, sched: Schedule, lam=None):
    """Damped Newton; returns (u, lam, iterations, residual history)."""
    ev = system.ev
    st = ev.state(u)
    if not st["ok"]:
        raise DomainViolation("current iterate is inadmissible")
    if not np.all(st["eig"] > 0):
        raise EllipticityLost(f"min eig w = {st['eig'].min():.3e}")
    R = system.residual(st, t, sigma, lam)
    history = [float(np.abs(R).max())]
    wts = ev.p.omega.weights
    for it in range(1, sched.newton_max_iter + 1):
        if history[-1] <= sched.newton_tol:
            return u, lam, it - 1, history, st
        J = system.jacobian(st, sigma, lam)
        rhs = -R if lam is None else -np.concatenate([R, [wts @ u]])
        with np.errstate(all="ignore"):
            try:
                delta = spsolve(J.tocsc(), rhs)
            except RuntimeError as exc:
                raise LinearSolveFailure(str(exc)) from exc
        if not np.all(np.isfinite(delta)):
            raise LinearSolveFailure("linearized system is singular")
        du, dlam = (delta, None) if lam is None else (delta[:-1], delta[-1])
        norm0 = np.linalg.norm(R) if lam is None else np.hypot(np.linalg.norm(R), wts @ u)
        alpha = 1.0
        while True:
            u_new = u + alpha * du
            lam_new = None if lam is None else lam + alpha * dlam
            st_new = ev.state(u_new)
            if _acceptable(st_new):
                R_new = system.residual(st_new, t, sigma, lam_new)
                norm1 = np.linalg.norm(R_new) if lam is None else np.hypot(np.linalg.norm(R_new), wts @ u_new)
                if norm1 <= (1 - 1e-4 * alpha) * norm0 or np.abs(R_new).max() <= sched.newton_tol:
                    break
            alpha *= 0.5
            if alpha < sched.alpha_min:
                raise StepTooSmall(f"backtracking reached alpha < {sched.alpha_min:g}")
        u, lam, st, R = u_new, lam_new, st_new, R_new
        history.append(float(np.abs(R).max()))
    if history[-1] <= sched.newton_tol:
        return u, lam, sched.newton_max_iter, history, st
    raise NonConvergence(f"Newton stopped at residual {history[-1]:.3e}")


# --------------------------------------------------------------------------
# Seed

def _fit_ball(points, weights=None):
    c = np.average(points, axis=0, weights=weights)
    r = float(np.mean(np.linalg.norm(points - c, axis=-1)))
    return c, r


def _quadratic_seeds(ev: _Evaluator):
    p = ev.p
    x0 = np.average(ev.X, axis=0, weights=p.omega.weights)
    yc = p.omega_star.center
    p0 = derivative_bundle(p.model, x0, yc, order=1).c_x
    d = ev.X - x0
    for kappa in KAPPAS:
        yield f"quadratic(kappa={kappa:g})", 0.5 * kappa * np.einsum("pi,pi->p", d, d) + d @ p0


def _affine_seeds(ev: _Evaluator):
    """Exact potentials of the affine maps x -> y0 + kappa (x - x0) for radial costs.

    With a the fixed point of that map, u = Phi((1 - kappa)^2 |x - a|^2) / (1 - kappa)
    has Du = c_x(x, y0 + kappa (x - x0)), so w = kappa c_xy along the map.
    The sign of kappa follows the sign of c_xy at (x0, y0).
    """
    p = ev.p
    fam = costs._family(p.model)
    fam = getattr(fam, "base", fam)
    if not isinstance(fam, costs._Radial):
        return
    x0 = np.average(ev.X, axis=0, weights=p.omega.weights)
    y0 = p.omega_star.center
    b = derivative_bundle(p.model, x0, y0, order=2, strict=False)
    eig = np.linalg.eigvalsh(0.5 * (b.c_xy + b.c_xy.T))
    if eig[0] > 0:
        sign = 1.0
    elif eig[-1] < 0:
        sign = -1.0
    else:
        return
    reach = float(np.max(np.linalg.norm(ev.X - x0, axis=-1)))
    for frac in AFFINE_FRACS:
        kappa = sign * frac * p.omega_star.radius / max(reach, p.omega.h)
        a = (y0 - kappa * x0) / (1.0 - kappa)
        d = ev.X - a
        s = (1.0 - kappa) ** 2 * np.einsum("pi,pi->p", d, d)
        with np.errstate(all="ignore"):
            u = fam.phi(s, 0) / (1.0 - kappa)
        if np.all(np.isfinite(u)):
            yield f"affine_image(kappa={kappa:.3g})", u


def _sup_seed(ev: _Evaluator, r):
    """u(x) = max over y in B_r(y0) of c(x, y) + sqrt(r^2 - |y - y0|^2)."""
    p = ev.p
    y0 = p.omega_star.center
    n = ev.n
    m = {1: 801, 2: 61, 3: 21}[n]
    axes = np.linspace(-1, 1, m)
    grid = np.stack(np.meshgrid(*([axes] * n), indexing="ij"), axis=-1).reshape(-1, n)
    grid = grid[np.einsum("pi,pi->p", grid, grid) < 1]
    cand = y0 + 0.999 * r * grid
    cap = np.sqrt(np.maximum(r * r - np.einsum("pi,pi->p", cand - y0, cand - y0), 0.0))
    u = np.empty(ev.N)
    for i, x in enumerate(ev.X):
        xs = np.broadcast_to(x, cand.shape)
        ok = costs.valid_pairs(p.model, xs, cand)
        vals = np.where(ok, costs._family(p.model).value(xs, cand) + cap, -np.inf)
        k = int(np.argmax(vals))
        y = cand[k]
        best = vals[k]
        for _ in range(20):
            b = derivative_bundle(p.model, x, y, order=2, strict=False)
            dy = y - y0
            s = np.sqrt(max(r * r - dy @ dy, 1e-300))
            grad = b.c_y - dy / s
            hess = b.c_yy - (np.eye(n) / s + np.outer(dy, dy) / s**3)
            try:
                step = -np.linalg.solve(hess, grad)
            except np.linalg.LinAlgError:
                break
            alpha = 1.0
            while alpha > 1e-8:
                yn = y + alpha * step
                if np.linalg.norm(yn - y0) < r and costs.valid_pairs(p.model, x, yn):
                    vn = costs.evaluate(p.model, x, yn) + np.sqrt(r * r - (yn - y0) @ (yn - y0))
                    if vn >= best:
                        break
                alpha *= 0.5
            if alpha <= 1e-8:
                break
            y, best = yn, vn
            if np.linalg.norm(alpha * step) < 1e-14:
                break
        u[i] = best
    return u


def _seed_ok(ev, st, tol):
    if not _acceptable(st):
        return False
    return bool(np.all(ev.p.omega_star.contains(st["Y"], tol=-tol)))


def initial_guess(problem: ProblemSpec, stencils: Stencils | None = None):
    """Strictly elliptic seed whose image lies inside Omega*.

    Tries the quadratic seeds for decreasing kappa, then (radial costs) exact
    potentials of small affine maps onto the target center, then the supremum of
    c-functions generated by a small hemisphere over the target center.
    Returns ``(PotentialField, kind)``.
    """
    ev = stencils if isinstance(stencils, _Evaluator) else _Evaluator(problem, stencils)
    h = problem.omega.h
    if problem.omega_star.radius < h:
        raise SeedFailure("target inradius is below the grid spacing")
    margin = 0.25 * problem.omega_star.h
    for kind, u in _quadratic_seeds(ev):
        st = ev.state(u)
        if _seed_ok(ev, st, margin):
            return ev.field(st), kind
    for kind, u in _affine_seeds(ev):
        st = ev.state(u)
        if _seed_ok(ev, st, margin):
            return ev.field(st), kind
    r = 0.5 * problem.omega_star.radius
    for _ in range(4):
        u = _sup_seed(ev, r)
        st = ev.state(u)
        if _seed_ok(ev, st, margin):
            return ev.field(st), f"sup_of_c_functions(r={r:g})"
        r *= 0.5
    raise SeedFailure("no admissible quadratic or supremum seed found")


# --------------------------------------------------------------------------
# Public operations

def map_T(problem: ProblemSpec, field: PotentialField):
    """T = Y(., Du) and a per-node flag for landing within 2h of Omega*."""
    Y, ok = costs.solve_Y(problem.model, problem.omega.nodes, field.Du, strict=False)
    if not np.all(ok):
        raise DomainViolation("Du is outside the range of c_x at some node")
    inside = problem.omega_star.distance(Y) >= -2 * problem.omega.h
    return Y, inside


def field_from_u(problem: ProblemSpec, u, stencils: Stencils | None = None) -> PotentialField:
    ev = _Evaluator(problem, stencils)
    st = ev.state(np.asarray(u, dtype=float), need_jac=False)
    if not st["ok"]:
        raise DomainViolation("potential is inadmissible")
    return ev.field(st)


def residual(problem: ProblemSpec, field: PotentialField, t: float, sigma: float,
             homotopy: Homotopy | None = None, stencils: Stencils | None = None):
    """Interior: det w - e^{sigma u + (1-t) f_off} B; boundary: phi*_t(T) - (1-t) g_off.

    Without a homotopy the target problem (t = 1) is evaluated with the
    quadratic defining function of Omega*.
    """
    ev = _Evaluator(problem, stencils)
    st = ev.state(field.u, need_jac=False)
    if not st["ok"]:
        raise DomainViolation("potential is inadmissible")
    if not np.all(st["eig"] > 0):
        raise EllipticityLost(f"min eig w = {st['eig'].min():.3e}")
    hom = homotopy or _target_homotopy(problem, ev)
    return _System(ev, hom).residual(st, t, sigma)


def _target_homotopy(problem, ev):
    os_ = problem.omega_star
    return Homotopy(os_.center, os_.radius, os_.center, os_.radius, np.zeros(ev.Ni),
                    np.zeros(ev.N - ev.Ni), 0.0)


def newton_step(problem: ProblemSpec, field: PotentialField, t: float = 1.0, sigma: float = 0.0,
                homotopy: Homotopy | None = None, schedule: Schedule | None = None,
                stencils: Stencils | None = None) -> PotentialField:
    """One damped Newton update at (t, sigma)."""
    sched = Schedule(**{**Schedule().__dict__, "newton_max_iter": 1}) if schedule is None else schedule
    ev = _Evaluator(problem, stencils)
    system = _System(ev, homotopy or _target_homotopy(problem, ev))
    st = ev.state(field.u)
    if not st["ok"]:
        raise DomainViolation("potential is inadmissible")
    scale = np.max(np.abs(st["w"]), axis=(1, 2)) ** ev.n
    if np.any(np.abs(st["det"]) <= 1e-12 * np.maximum(scale, 1e-300)):
        raise LinearSolveFailure("w is singular at some node")
    if not np.all(st["eig"] > 0):
        raise EllipticityLost(f"min eig w = {st['eig'].min():.3e}")
    R = system.residual(st, t, sigma)
    if np.abs(R).max() <= sched.newton_tol:
        return field
    J = system.jacobian(st, sigma)
    with np.errstate(all="ignore"):
        try:
            if sigma == 0:
                # constants span the kernel; pin the gauge and solve in the least-squares sense
                gauge = sparse.csr_matrix(ev.p.omega.weights[None, :])
                du = lsqr(sparse.vstack([J, gauge]).tocsr(), np.concatenate([-R, [0.0]]),
                          atol=1e-14, btol=1e-14, iter_lim=20 * ev.N)[0]
            else:
                du = spsolve(J.tocsc(), -R)
        except RuntimeError as exc:
            raise LinearSolveFailure(str(exc)) from exc
    if not np.all(np.isfinite(du)):
        raise LinearSolveFailure("linearized system is singular")
    alpha, n0 = 1.0, np.linalg.norm(R)
    while alpha >= sched.alpha_min:
        st_new = ev.state(field.u + alpha * du)
        if _acceptable(st_new) and np.linalg.norm(system.residual(st_new, t, sigma)) <= (1 - 1e-4 * alpha) * n0:
            return ev.field(st_new)
        alpha *= 0.5
    raise StepTooSmall(f"backtracking reached alpha < {sched.alpha_min:g}")


def _record(system, st, stage, t, sigma, dt, iters, history):
    beta = system.beta(st)
    gamma = system.ev.p.omega.normals
    return {"stage": stage, "t": float(t), "sigma": float(sigma), "dt": float(dt),
            "newton_iterations": int(iters), "residual_history": history,
            "residual": history[-1], "min_eig_w": float(st["eig"].min()),
            "min_beta_dot_gamma": float(np.min(np.einsum("pk,pk->p", beta, gamma)))}


def continuation_solve(problem: ProblemSpec, schedule: Schedule | dict | None = None,
                       stencils: Stencils | None = None, sigma_stops=None) -> SolveResult:
    """Continuation in t from the seed, then sigma from sigma0 down to sigma_min.

    ``sigma_stops`` (optional list) records mean-normalized snapshots of u
    at those sigma values in the result notes (used by the sigma-limit study).
    """
    sched = schedule if isinstance(schedule, Schedule) else Schedule.from_dict(schedule)
    ev = _Evaluator(problem, stencils)
    seed, seed_kind = initial_guess(problem, ev)
    st0 = ev.state(seed.u)
    Ni = ev.Ni
    sigma = sched.sigma0
    f_off = -sigma * seed.u[:Ni] + np.log(st0["det"][:Ni] / st0["B"][:Ni])
    c0, r0 = _fit_ball(seed.T[Ni:])
    phi0, _ = _phi_ball(seed.T[Ni:], c0, r0)
    os_ = problem.omega_star
    hom = Homotopy(c0, r0, os_.center.copy(), os_.radius, f_off, phi0, sigma)
    system = _System(ev, hom)
    trace = []
    u = seed.u.copy()
    system.residual(st0, 0.0, sigma)
    trace.append(_record(system, st0, "seed", 0.0, sigma, 0.0, 0, [0.0]))
    t, dt = 0.0, sched.dt0
    while t < 1.0:
        t_new = min(1.0, t + dt)
        try:
            u_new, _, iters, hist, st = _newton(system, u, t_new, sigma, sched)
        except (NonConvergence, StepTooSmall, LinearSolveFailure, DomainViolation, EllipticityLost) as exc:
            trace.append({"stage": "t", "t": float(t_new), "sigma": float(sigma), "dt": float(dt),
                          "rejected": type(exc).__name__})
            dt *= sched.shrink
            if dt < sched.dt_min:
                raise ContinuationStall(f"t-step underflow at t = {t:.6f}", trace) from exc
            continue
        u, t = u_new, t_new
        trace.append(_record(system, st, "t", t, sigma, dt, iters, hist))
        dt *= sched.grow
    snapshots = {}
    stops = set(float(s) for s in (sigma_stops or []))

    def snap(s, uu):
        if any(abs(s - q) <= 1e-12 * max(q, 1e-300) for q in stops):
            snapshots[s] = uu.copy()

    snap(sigma, u)
    log_sigma, log_min = np.log(sigma), np.log(sched.sigma_min)
    step = np.log(sched.sigma_factor)
    while log_sigma > log_min + 1e-12:
        target = max(log_sigma + step, log_min)
        trial = float(np.exp(target))
        try:
            u_new, _, iters, hist, st = _newton(system, u, 1.0, trial, sched)
        except (NonConvergence, StepTooSmall, LinearSolveFailure, DomainViolation, EllipticityLost) as exc:
            trace.append({"stage": "sigma", "t": 1.0, "sigma": trial, "rejected": type(exc).__name__})
            step *= 0.5
            if abs(step) < 1e-6:
                raise ContinuationStall(f"sigma-step underflow at sigma = {np.exp(log_sigma):.3e}", trace) from exc
            continue
        u, log_sigma = u_new, target
        sigma = trial
        trace.append(_record(system, st, "sigma", 1.0, sigma, 0.0, iters, hist))
        snap(sigma, u)
        step = np.log(sched.sigma_factor)
    lam = None
    final_sigma = sigma
    if sched.sigma_zero_polish:
        lam0 = float(np.average(sigma * u[:Ni], weights=problem.omega.weights[:Ni]))
        u_mean = u - np.average(u, weights=problem.omega.weights)
        u, lam, iters, hist, st = _newton(system, u_mean, 1.0, 0.0, sched, lam=lam0)
        final_sigma = 0.0
        trace.append(_record(system, st, "sigma_zero", 1.0, 0.0, 0.0, iters, hist))
    u = u - np.average(u, weights=problem.omega.weights)
    st = ev.state(u, need_jac=False)
    result = SolveResult(ev.field(st), trace, True, final_sigma, lam, PATH, seed_kind)
    if snapshots:
        result.notes.append({"sigma_snapshots": snapshots})
    return result


def sigma_family(problem: ProblemSpec, sigmas, schedule: Schedule | dict | None = None,
                 stencils: Stencils | None = None):
    """Solutions u_sigma at t = 1 for each sigma in ``sigmas`` (descending)."""
    sched = schedule if isinstance(schedule, Schedule) else Schedule.from_dict(schedule)
    sigmas = sorted((float(s) for s in sigmas), reverse=True)
    sched = Schedule(**{**sched.__dict__, "sigma0": sigmas[0], "sigma_min": sigmas[-1],
                        "sigma_zero_polish": False})
    res = continuation_solve(problem, sched, stencils, sigma_stops=sigmas)
    snaps = res.notes[0]["sigma_snapshots"] if res.notes else {}
    return {s: snaps[min(snaps, key=lambda q: abs(q - s))] for s in sigmas}, res
