"""Cost functions, their derivative calculus and the derived maps Y, X, A, B.

Conventions
-----------
Costs are *maximized* (``c(x, y) = x.y`` is the quadratic cost).  Index
conventions for the derivative tensors at one point ``(x, y)``:

* ``c_xy[i, k]``      = d^2 c / dx_i dy_k
* ``c_xy_inv[k, i]``  = c^{k,i}, the inverse matrix (first index is a y-index)
* ``c_xxy[i, j, k]``  = c_{ij,k}
* ``c_xyy[i, k, l]``  = c_{i,kl}
* ``c_xxyy[i, j, r, s]`` = c_{ij,rs}

Every public function accepts single points of shape ``(n,)`` or batches of
shape ``(..., n)``; batch dimensions broadcast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainViolation, NoSolution, SingularMixedHessian
from .polynomial import Polynomial

COST_IDS = ("quadratic", "sqrt_plus", "sqrt_minus", "dot_plus_fg", "power", "power_compound")
SINGULAR_RTOL = 1e-12
NEWTON_MAX_ITER = 50
NEWTON_TOL = 1e-12

_ORDER_KEYS = {
    0: ("c",),
    1: ("c_x", "c_y"),
    2: ("c_xx", "c_yy", "c_xy"),
    3: ("c_xxy", "c_xyy"),
    4: ("c_xxyy",),
}


@dataclass(frozen=True)
class CostModel:
    """Immutable description of a cost function.

    Args:
        id: one of :data:`COST_IDS`.
        params: ``power`` takes ``m`` and ``sign`` (+1 / -1); ``power_compound``
            takes ``p`` in [1, 2]; ``dot_plus_fg`` takes polynomial specs
            ``f`` and ``g``.
        derivative_mode: ``"analytic"`` or ``"finite_difference"``.
        fd_step: central-difference step used in finite-difference mode.
        sep_min: minimum |x - y| for power costs with m < 1.
        margin: ``sqrt_minus`` is restricted to |x - y| <= 1 - margin.
        reflected: evaluate ``c*(x, y) = c(y, x)`` instead of ``c``.
    """

    id: str
    params: dict = field(default_factory=dict, hash=False)
    derivative_mode: str = "analytic"
    fd_step: float = 1e-4
    sep_min: float = 0.0
    margin: float = 1e-6
    reflected: bool = False

    def __post_init__(self):
        if self.id not in COST_IDS:
            raise ValueError(f"unknown cost id {self.id!r}")
        if self.derivative_mode not in ("analytic", "finite_difference"):
            raise ValueError(f"unknown derivative_mode {self.derivative_mode!r}")
        if not self.fd_step > 0:
            raise ValueError("fd_step must be positive")
        if self.sep_min < 0 or self.margin < 0:
            raise ValueError("sep_min and margin must be nonnegative")
        if self.id == "power":
            if "m" not in self.params:
                raise ValueError("power cost needs parameter m")
            if self.params.get("sign", 1) not in (1, -1):
                raise ValueError("power cost sign must be +1 or -1")
        if self.id == "power_compound":
            p = self.params.get("p")
            if p is None or not 1.0 <= p <= 2.0:
                raise ValueError("power_compound requires 1 <= p <= 2")
        if self.id == "dot_plus_fg" and not ("f" in self.params and "g" in self.params):
            raise ValueError("dot_plus_fg needs polynomial parameters f and g")

    def reflect(self) -> CostModel:
        """The cost ``c*(x, y) = c(y, x)`` with the roles of x and y swapped."""
        return CostModel(self.id, dict(self.params), self.derivative_mode, self.fd_step,
                         self.sep_min, self.margin, not self.reflected)

    def with_mode(self, mode: str) -> CostModel:
        return CostModel(self.id, dict(self.params), mode, self.fd_step, self.sep_min,
                         self.margin, self.reflected)

    def to_dict(self):
        params = dict(self.params)
        for key in ("f", "g"):
            if isinstance(params.get(key), Polynomial):
                params[key] = params[key].to_spec()
        return {"id": self.id, "params": params, "derivative_mode": self.derivative_mode,
                "fd_step": self.fd_step, "sep_min": self.sep_min, "margin": self.margin,
                "reflected": self.reflected}

    @property
    def label(self) -> str:
        if self.id == "power":
            sign = "+" if self.params.get("sign", 1) == 1 else "-"
            return f"power(m={self.params['m']:g},{sign})"
        if self.id == "power_compound":
            return f"power_compound(p={self.params['p']:g})"
        return self.id


@dataclass
class DerivativeBundle:
    """Derivatives of c at a point (or a batch of points) up to ``order``.

    Entries above the requested order are ``None``.  ``singular`` flags points
    where ``|det c_xy|`` is below tolerance; ``c_xy_inv`` is NaN there.
    """

    order: int
    c: np.ndarray
    c_x: np.ndarray | None = None
    c_y: np.ndarray | None = None
    c_xx: np.ndarray | None = None
    c_yy: np.ndarray | None = None
    c_xy: np.ndarray | None = None
    c_xy_inv: np.ndarray | None = None
    c_xxy: np.ndarray | None = None
    c_xyy: np.ndarray | None = None
    c_xxyy: np.ndarray | None = None
    det_c_xy: np.ndarray | None = None
    singular: np.ndarray | None = None


# --------------------------------------------------------------------------
# Families

def _falling(beta, k):
    out = 1.0
    for j in range(k):
        out *= beta - j
    return out


class _Radial:
    """Translation- and rotation-invariant cost ``c = Phi(|x - y|^2)``."""

    def __init__(self, kind, alpha, beta=None, eps=None, sep_min=0.0, max_dist=None,
                 singular_at_zero=False):
        self.kind = kind
        self.alpha = alpha
        self.beta = beta
        self.eps = eps
        self.sep_min = sep_min
        self.max_dist = max_dist
        self.singular_at_zero = singular_at_zero

    def phi(self, s, k):
        a, b, e = self.alpha, self.beta, self.eps
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.kind == "shifted":
                return a * _falling(b, k) * e**k * (1.0 + e * s) ** (b - k)
            if self.kind == "power":
                if k == 0:
                    return a * s**b
                return a * _falling(b, k) * s ** (b - k)
            # log
            if k == 0:
                return a * np.log(s)
            return a * (-1.0) ** (k - 1) * math.factorial(k - 1) * s ** (-float(k))

    def valid(self, x, y):
        d = np.linalg.norm(x - y, axis=-1)
        ok = np.isfinite(d)
        if self.max_dist is not None:
            ok &= d <= self.max_dist
        if self.sep_min > 0:
            ok &= d >= self.sep_min
        if self.kind in ("power", "log") and (self.kind == "log" or self.beta <= 0):
            ok &= d > 0
        return ok

    def value(self, x, y):
        d = x - y
        return self.phi(np.einsum("...i,...i->...", d, d), 0)

    def tensors(self, x, y, order):
        x, y = np.broadcast_arrays(x, y)
        d = x - y
        n = d.shape[-1]
        s = np.einsum("...i,...i->...", d, d)
        eye = np.eye(n)
        out = {"c": self.phi(s, 0)}
        if order == 0:
            return out
        p1 = self.phi(s, 1)[..., None]
        d1 = 2.0 * p1 * d
        out["c_x"], out["c_y"] = d1, -d1
        if order == 1:
            return out
        p2 = self.phi(s, 2)
        dd = d[..., :, None] * d[..., None, :]
        d2 = 2.0 * p1[..., None] * eye + 4.0 * p2[..., None, None] * dd
        out["c_xx"], out["c_yy"], out["c_xy"] = d2, d2.copy(), -d2
        if order == 2:
            return out
        p3 = self.phi(s, 3)
        sym = (np.einsum("ij,...k->...ijk", eye, d) + np.einsum("ik,...j->...ijk", eye, d)
               + np.einsum("jk,...i->...ijk", eye, d))
        ddd = dd[..., None] * d[..., None, None, :]
        d3 = 4.0 * p2[..., None, None, None] * sym + 8.0 * p3[..., None, None, None] * ddd
        out["c_xxy"], out["c_xyy"] = -d3, d3
        if order == 3:
            return out
        p4 = self.phi(s, 4)
        dlt = (np.einsum("ij,kl->ijkl", eye, eye) + np.einsum("ik,jl->ijkl", eye, eye)
               + np.einsum("il,jk->ijkl", eye, eye))
        six = (np.einsum("ij,...kl->...ijkl", eye, dd) + np.einsum("ik,...jl->...ijkl", eye, dd)
               + np.einsum("il,...jk->...ijkl", eye, dd) + np.einsum("jk,...il->...ijkl", eye, dd)
               + np.einsum("jl,...ik->...ijkl", eye, dd) + np.einsum("kl,...ij->...ijkl", eye, dd))
        dddd = ddd[..., None] * d[..., None, None, None, :]
        e4 = (..., None, None, None, None)
        out["c_xxyy"] = (4.0 * p2[e4] * dlt + 8.0 * p3[e4] * six + 16.0 * p4[e4] * dddd)
        return out


class _SqrtPlus(_Radial):
    def __init__(self):
        super().__init__("shifted", -1.0, 0.5, 1.0)

    def inverse_y(self, x, p):
        pp = np.einsum("...i,...i->...", p, p)
        ok = pp < 1.0
        with np.errstate(invalid="ignore", divide="ignore"):
            y = x + p / np.sqrt(1.0 - pp)[..., None]
        return y, ok & np.all(np.isfinite(y), axis=-1)

    def inverse_x(self, q, y):
        # c_y = (x - y) / sqrt(1 + |x - y|^2)
        qq = np.einsum("...i,...i->...", q, q)
        ok = qq < 1.0
        with np.errstate(invalid="ignore", divide="ignore"):
            x = y + q / np.sqrt(1.0 - qq)[..., None]
        return x, ok & np.all(np.isfinite(x), axis=-1)


class _SqrtMinus(_Radial):
    def __init__(self, margin):
        super().__init__("shifted", -1.0, 0.5, -1.0, max_dist=1.0 - margin)

    def inverse_y(self, x, p):
        pp = np.einsum("...i,...i->...", p, p)
        y = x - p / np.sqrt(1.0 + pp)[..., None]
        return y, self.valid(x, y)

    def inverse_x(self, q, y):
        # c_y = -(x - y) / sqrt(1 - |x - y|^2)
        qq = np.einsum("...i,...i->...", q, q)
        x = y - q / np.sqrt(1.0 + qq)[..., None]
        return x, self.valid(x, y)


class _Power(_Radial):
    def __init__(self, m, sign, sep_min):
        self.m = float(m)
        self.sign = sign
        if m == 0:
            super().__init__("log", 0.5 * sign, sep_min=sep_min, singular_at_zero=True)
        else:
            super().__init__("power", sign / m, m / 2.0,
                             sep_min=sep_min if m < 1 else 0.0,
                             singular_at_zero=(m != 2))

    def _displacement(self, p):
        # c_x = sign |d|^(m-2) d  =>  d = sign |p|^((2-m)/(m-1)) p
        m = self.m
        if m == 1:
            return None, np.zeros(p.shape[:-1], dtype=bool)
        norm = np.linalg.norm(p, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if m == 2:
                scale = np.ones_like(norm)
            else:
                scale = norm ** ((2.0 - m) / (m - 1.0))
            d = self.sign * scale[..., None] * p
        ok = np.all(np.isfinite(d), axis=-1)
        if m < 2 and m != 1:
            ok &= norm > 0
        return d, ok

    def inverse_y(self, x, p):
        d, ok = self._displacement(p)
        if d is None:
            return np.full(np.broadcast_shapes(x.shape, p.shape), np.nan), ok
        y = x - d
        return y, ok & self.valid(x, y)

    def inverse_x(self, q, y):
        # c_y = -sign |d|^(m-2) d
        d, ok = self._displacement(-q)
        if d is None:
            return np.full(np.broadcast_shapes(q.shape, y.shape), np.nan), ok
        x = y + d
        return x, ok & self.valid(x, y)


class _Compound(_Radial):
    def __init__(self, p):
        super().__init__("shifted", -1.0, p / 2.0, 1.0)

    inverse_y = None
    inverse_x = None


class _Quadratic:
    def valid(self, x, y):
        return np.all(np.isfinite(x - y), axis=-1)

    def value(self, x, y):
        return np.einsum("...i,...i->...", x, y)

    def tensors(self, x, y, order):
        x, y = np.broadcast_arrays(x, y)
        n = x.shape[-1]
        batch = x.shape[:-1]
        out = {"c": np.einsum("...i,...i->...", x, y)}
        if order >= 1:
            out["c_x"], out["c_y"] = y.copy(), x.copy()
        if order >= 2:
            out["c_xx"] = np.zeros(batch + (n, n))
            out["c_yy"] = np.zeros(batch + (n, n))
            out["c_xy"] = np.broadcast_to(np.eye(n), batch + (n, n)).copy()
        if order >= 3:
            out["c_xxy"] = np.zeros(batch + (n, n, n))
            out["c_xyy"] = np.zeros(batch + (n, n, n))
        if order >= 4:
            out["c_xxyy"] = np.zeros(batch + (n, n, n, n))
        return out

    def inverse_y(self, x, p):
        y = np.broadcast_to(p, np.broadcast_shapes(x.shape, p.shape)).copy()
        return y, np.all(np.isfinite(y), axis=-1)

    def inverse_x(self, q, y):
        x = np.broadcast_to(q, np.broadcast_shapes(q.shape, y.shape)).copy()
        return x, np.all(np.isfinite(x), axis=-1)


class _DotPlusFG:
    """``c(x, y) = x.y + f(x) g(y)`` with polynomial f and g."""

    def __init__(self, f, g):
        self.f = Polynomial.from_spec(f)
        self.g = Polynomial.from_spec(g)

    def valid(self, x, y):
        return np.all(np.isfinite(x - y), axis=-1)

    def value(self, x, y):
        return np.einsum("...i,...i->...", x, y) + self.f(x) * self.g(y)

    def tensors(self, x, y, order):
        x, y = np.broadcast_arrays(x, y)
        n = x.shape[-1]
        f, g = self.f(x), self.g(y)
        out = {"c": np.einsum("...i,...i->...", x, y) + f * g}
        if order == 0:
            return out
        fx, gy = self.f.grad(x), self.g.grad(y)
        out["c_x"] = y + g[..., None] * fx
        out["c_y"] = x + f[..., None] * gy
        if order == 1:
            return out
        fxx, gyy = self.f.hess(x), self.g.hess(y)
        out["c_xx"] = g[..., None, None] * fxx
        out["c_yy"] = f[..., None, None] * gyy
        out["c_xy"] = np.eye(n) + fx[..., :, None] * gy[..., None, :]
        if order == 2:
            return out
        out["c_xxy"] = fxx[..., :, :, None] * gy[..., None, None, :]
        out["c_xyy"] = fx[..., :, None, None] * gyy[..., None, :, :]
        if order == 3:
            return out
        out["c_xxyy"] = fxx[..., :, :, None, None] * gyy[..., None, None, :, :]
        return out

    inverse_y = None
    inverse_x = None


class _Reflected:
    def __init__(self, base):
        self.base = base
        self.singular_at_zero = getattr(base, "singular_at_zero", False)

    def valid(self, x, y):
        return self.base.valid(y, x)

    def value(self, x, y):
        return self.base.value(y, x)

    def tensors(self, x, y, order):
        b = self.base.tensors(y, x, order)
        out = {"c": b["c"]}
        if order >= 1:
            out["c_x"], out["c_y"] = b["c_y"], b["c_x"]
        if order >= 2:
            out["c_xx"], out["c_yy"] = b["c_yy"], b["c_xx"]
            out["c_xy"] = np.swapaxes(b["c_xy"], -1, -2)
        if order >= 3:
            out["c_xxy"] = np.moveaxis(b["c_xyy"], -3, -1)
            out["c_xyy"] = np.moveaxis(b["c_xxy"], -1, -3)
        if order >= 4:
            out["c_xxyy"] = np.moveaxis(b["c_xxyy"], (-4, -3), (-2, -1))
        return out

    @property
    def inverse_y(self):
        if getattr(self.base, "inverse_x", None) is None:
            return None
        return lambda x, p: self.base.inverse_x(p, x)

    @property
    def inverse_x(self):
        if getattr(self.base, "inverse_y", None) is None:
            return None
        return lambda q, y: self.base.inverse_y(y, q)


def _family(model: CostModel):
    if model.id == "quadratic":
        fam = _Quadratic()
    elif model.id == "sqrt_plus":
        fam = _SqrtPlus()
    elif model.id == "sqrt_minus":
        fam = _SqrtMinus(model.margin)
    elif model.id == "power":
        fam = _Power(model.params["m"], model.params.get("sign", 1), model.sep_min)
    elif model.id == "power_compound":
        fam = _Compound(float(model.params["p"]))
    else:
        fam = _DotPlusFG(model.params["f"], model.params["g"])
    return _Reflected(fam) if model.reflected else fam


# --------------------------------------------------------------------------
# Evaluation

def _as_points(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return x, y


def valid_pairs(model: CostModel, x, y) -> np.ndarray:
    """Boolean mask of pairs inside the validity set of the cost."""
    x, y = _as_points(x, y)
    return _family(model).valid(x, y)


def evaluate(model: CostModel, x, y):
    """c(x, y); raises DomainViolation outside the validity set."""
    x, y = _as_points(x, y)
    fam = _family(model)
    ok = fam.valid(x, y)
    if not np.all(ok):
        raise DomainViolation(f"{model.label}: point pair outside validity set")
    val = fam.value(x, y)
    return float(val) if np.ndim(val) == 0 else val


def _fd_tensors(fam, x, y, order, step):
    """Order-k tensors by central differences of the analytic order k-1 ones."""
    n = x.shape[-1]

    def diff(key, wrt):
        parts = []
        for s in range(n):
            e = np.zeros(n)
            e[s] = step
            if wrt == "x":
                hi, lo = fam.tensors(x + e, y, order_of[key])[key], fam.tensors(x - e, y, order_of[key])[key]
            else:
                hi, lo = fam.tensors(x, y + e, order_of[key])[key], fam.tensors(x, y - e, order_of[key])[key]
            parts.append((hi - lo) / (2.0 * step))
        return np.stack(parts, axis=-1)

    order_of = {k: o for o, keys in _ORDER_KEYS.items() for k in keys}
    out = {"c": fam.value(x, y)}
    if order >= 1:
        out["c_x"], out["c_y"] = diff("c", "x"), diff("c", "y")
    if order >= 2:
        out["c_xx"] = diff("c_x", "x")
        out["c_xx"] = 0.5 * (out["c_xx"] + np.swapaxes(out["c_xx"], -1, -2))
        out["c_yy"] = diff("c_y", "y")
        out["c_yy"] = 0.5 * (out["c_yy"] + np.swapaxes(out["c_yy"], -1, -2))
        out["c_xy"] = diff("c_x", "y")
    if order >= 3:
        out["c_xxy"] = diff("c_xx", "y")
        out["c_xyy"] = diff("c_xy", "y")
    if order >= 4:
        out["c_xxyy"] = diff("c_xxy", "y")
    return out


def derivative_bundle(model: CostModel, x, y, order: int = 4, strict: bool = True) -> DerivativeBundle:
    """Derivatives of c at (x, y) through ``order`` (0..4).

    With ``strict`` a singular mixed Hessian at any point raises
    :class:`SingularMixedHessian`; otherwise the ``singular`` mask is set and
    the inverse is NaN at those points.
    """
    if not 0 <= order <= 4:
        raise ValueError("order must be between 0 and 4")
    x, y = _as_points(x, y)
    fam = _family(model)
    ok = fam.valid(x, y)
    coincident = np.zeros(ok.shape, dtype=bool)
    if getattr(fam, "singular_at_zero", False):
        coincident = np.all(np.broadcast_arrays(x, y)[0] == np.broadcast_arrays(x, y)[1], axis=-1)
        ok = ok | coincident
    if strict and not np.all(ok):
        raise DomainViolation(f"{model.label}: point pair outside validity set")
    if strict and np.any(coincident):
        raise SingularMixedHessian(f"{model.label}: mixed Hessian singular at x = y")
    with np.errstate(all="ignore"):
        if model.derivative_mode == "analytic":
            t = fam.tensors(x, y, order)
        else:
            t = _fd_tensors(fam, x, y, order, model.fd_step)
    bundle = DerivativeBundle(order=order, **t)
    if order >= 2:
        cxy = bundle.c_xy
        n = cxy.shape[-1]
        with np.errstate(all="ignore"):
            det = np.linalg.det(np.nan_to_num(cxy, nan=0.0, posinf=0.0, neginf=0.0))
            scale = np.max(np.abs(np.nan_to_num(cxy, nan=0.0, posinf=0.0, neginf=0.0)), axis=(-2, -1))
        singular = (np.abs(det) <= SINGULAR_RTOL * (n * scale) ** n) | ~np.all(np.isfinite(cxy), axis=(-2, -1))
        singular |= coincident | ~ok
        safe = np.where(singular[..., None, None], np.eye(n), np.nan_to_num(cxy))
        inv = np.linalg.inv(safe)
        inv = np.where(singular[..., None, None], np.nan, inv)
        bundle.c_xy_inv = inv
        bundle.det_c_xy = np.where(singular, 0.0, det)
        bundle.singular = singular
        if strict and np.any(singular):
            raise SingularMixedHessian(f"{model.label}: |det c_xy| below tolerance")
    return bundle


# --------------------------------------------------------------------------
# Inverse maps

def _newton_batch(residual_and_jac, z_starts, target_shape, max_iter=NEWTON_MAX_ITER, tol=NEWTON_TOL):
    """Damped Newton on many independent small systems at once.

    ``residual_and_jac(z, mask)`` returns residuals and Jacobians for the rows
    selected by ``mask``.  Each start is tried in turn for the rows that have
    not converged yet.
    """
    z_out = np.full(target_shape, np.nan)
    done = np.zeros(target_shape[:-1], dtype=bool)
    for z0 in z_starts:
        z = np.broadcast_to(z0, target_shape).copy()
        active = ~done
        if not np.any(active):
            break
        with np.errstate(all="ignore"):
            for _ in range(max_iter):
                idx = np.nonzero(active)
                if len(idx[0]) == 0:
                    break
                zi = z[idx]
                r, jac = residual_and_jac(zi, idx)
                norm = np.linalg.norm(r, axis=-1)
                conv = norm <= tol * (1.0 + np.abs(zi).max(axis=-1))
                bad = ~np.isfinite(norm)
                ok_j = np.all(np.isfinite(jac), axis=(-2, -1))
                safe = np.where(ok_j[..., None, None], jac, np.eye(jac.shape[-1]))
                try:
                    step = -np.linalg.solve(safe, r[..., None])[..., 0]
                except np.linalg.LinAlgError:
                    step = -np.einsum("...ij,...j->...i", np.linalg.pinv(safe), r)
                alpha = np.ones(norm.shape)
                accepted = np.zeros(norm.shape, dtype=bool)
                f0 = 0.5 * norm**2
                for _ls in range(30):
                    trial = zi + alpha[..., None] * step
                    rt, _ = residual_and_jac(trial, idx)
                    ft = 0.5 * np.einsum("...i,...i->...", rt, rt)
                    good = np.isfinite(ft) & (ft <= f0 * (1.0 - 2e-4 * alpha))
                    newly = good & ~accepted
                    zi = np.where(newly[..., None], trial, zi)
                    accepted |= good
                    if np.all(accepted | conv | bad):
                        break
                    alpha = np.where(accepted, alpha, 0.5 * alpha)
                z[idx] = np.where(conv[..., None], z[idx], zi)
                finished = conv
                stalled = bad | (~accepted & ~conv)
                rows = tuple(a[finished] for a in idx)
                done[rows] = True
                z_out[rows] = z[rows]
                dead = tuple(a[stalled] for a in idx)
                active[dead] = False
                active[rows] = False
    return z_out, done


def _start_offsets(n):
    base = [np.zeros(n)]
    for k in range(n):
        e = np.zeros(n)
        e[k] = 0.5
        base.extend([e, -e])
    return base


def _solve_Y(model: CostModel, x, p):
    x, p = _as_points(x, p)
    if x.ndim == 1 and p.ndim == 1:
        z, ok = _solve_Y(model, x[None], p[None])
        return z[0], ok[0]
    fam = _family(model)
    shape = np.broadcast_shapes(x.shape, p.shape)
    xb, pb = np.broadcast_to(x, shape), np.broadcast_to(p, shape)
    inv = getattr(fam, "inverse_y", None)
    if inv is not None and model.derivative_mode == "analytic":
        with np.errstate(all="ignore"):
            y, ok = inv(xb, pb)
        return y, ok & np.all(np.isfinite(y), axis=-1)

    def res_jac(yi, idx):
        t = fam.tensors(xb[idx], yi, 2) if model.derivative_mode == "analytic" else \
            _fd_tensors(fam, xb[idx], yi, 2, model.fd_step)
        valid = fam.valid(xb[idx], yi)
        r = np.where(valid[..., None], t["c_x"] - pb[idx], np.nan)
        return r, t["c_xy"]

    starts = [xb + pb, pb, xb - pb] + [xb + pb + o for o in _start_offsets(shape[-1])[1:]]
    y, ok = _newton_batch(res_jac, starts, shape)
    if np.any(ok):
        ok &= fam.valid(xb, y)
    return y, ok


def _solve_X(model: CostModel, q, y):
    q, y = _as_points(q, y)
    if q.ndim == 1 and y.ndim == 1:
        z, ok = _solve_X(model, q[None], y[None])
        return z[0], ok[0]
    fam = _family(model)
    shape = np.broadcast_shapes(q.shape, y.shape)
    qb, yb = np.broadcast_to(q, shape), np.broadcast_to(y, shape)
    inv = getattr(fam, "inverse_x", None)
    if inv is not None and model.derivative_mode == "analytic":
        with np.errstate(all="ignore"):
            x, ok = inv(qb, yb)
        return x, ok & np.all(np.isfinite(x), axis=-1)

    def res_jac(xi, idx):
        t = fam.tensors(xi, yb[idx], 2) if model.derivative_mode == "analytic" else \
            _fd_tensors(fam, xi, yb[idx], 2, model.fd_step)
        valid = fam.valid(xi, yb[idx])
        r = np.where(valid[..., None], t["c_y"] - qb[idx], np.nan)
        return r, np.swapaxes(t["c_xy"], -1, -2)

    starts = [yb + qb, qb, yb - qb] + [yb + qb + o for o in _start_offsets(shape[-1])[1:]]
    x, ok = _newton_batch(res_jac, starts, shape)
    if np.any(ok):
        ok &= fam.valid(x, yb)
    return x, ok


def solve_Y(model: CostModel, x, p, strict: bool = True):
    """The point y with c_x(x, y) = p.

    Uses the closed-form inverse when the cost family has one and damped
    Newton on c_x(x, .) = p otherwise.  With ``strict=False`` returns
    ``(y, ok)`` instead of raising.
    """
    y, ok = _solve_Y(model, x, p)
    if strict:
        if not np.all(ok):
            raise NoSolution(f"{model.label}: c_x(x, .) = p has no solution in the validity set")
        return y
    return y, ok


def solve_X(model: CostModel, q, y, strict: bool = True):
    """The point x with c_y(x, y) = q (mirror of :func:`solve_Y`)."""
    x, ok = _solve_X(model, q, y)
    if strict:
        if not np.all(ok):
            raise NoSolution(f"{model.label}: c_y(., y) = q has no solution in the validity set")
        return x
    return x, ok


def matrix_A(model: CostModel, x, p):
    """A(x, p) = c_xx(x, Y(x, p)), exactly symmetrized."""
    x, p = _as_points(x, p)
    y = solve_Y(model, x, p)
    cxx = derivative_bundle(model, x, y, order=2, strict=False).c_xx
    return 0.5 * (cxx + np.swapaxes(cxx, -1, -2))


def scalar_B(model: CostModel, x, p, psi):
    """B(x, p) = |det c_xy(x, Y(x, p))| * psi."""
    psi = np.asarray(psi, dtype=float)
    if np.any(~(psi > 0)):
        raise ValueError("psi must be positive")
    x, p = _as_points(x, p)
    y = solve_Y(model, x, p)
    b = derivative_bundle(model, x, y, order=2)
    out = np.abs(b.det_c_xy) * psi
    return float(out) if np.ndim(out) == 0 else out


def cost_from_spec(spec: dict) -> CostModel:
    params = dict(spec.get("params", {}))
    if spec["id"] == "dot_plus_fg":
        params["f"] = Polynomial.from_spec(params["f"])
        params["g"] = Polynomial.from_spec(params["g"])
    return CostModel(
        spec["id"],
        params,
        spec.get("derivative_mode", "analytic"),
        float(spec.get("fd_step", 1e-4)),
        float(spec.get("sep_min", 0.0)),
        float(spec.get("margin", 1e-6)),
    )
