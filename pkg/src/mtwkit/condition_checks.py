"""Sampled certification of the structural conditions A1, A2 and A3w/A3.

Every verdict is a statement about the samples actually drawn; reports
record the resolution and seed used so that a run can be repeated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.optimize import minimize
from scipy.stats import qmc

from . import cost_models as costs
from .cost_models import CostModel, derivative_bundle

REPORT_TOL = 1e-8
ROUNDTRIP_TOL = 1e-6
MAX_PAIRS = 60000
REFINE_PAIRS = 8
P_RANGE_NOTE = "p sampled as c_x(x, y) over the y-samples, not over all of R^n"


@dataclass
class SampleRegion:
    """Where conditions are sampled.

    Boxes are ``(n, 2)`` arrays of ``[lo, hi]`` rows; explicit clouds
    (``x_points``/``y_points``) override the boxes.  ``n_grid`` is the
    per-axis grid resolution and ``n_quasi`` the number of added
    quasi-random points per box.
    """

    x_box: np.ndarray | None = None
    y_box: np.ndarray | None = None
    x_points: np.ndarray | None = None
    y_points: np.ndarray | None = None
    n_grid: int = 9
    n_quasi: int = 200
    n_frames: int = 16
    separation_min: float = 0.0
    p_samples: np.ndarray | None = None
    seed: int = 0
    max_pairs: int = MAX_PAIRS

    def __post_init__(self):
        if self.n_grid < 1 or self.n_quasi < 0 or self.n_frames < 1:
            raise ValueError("sample counts must be positive")
        if self.separation_min < 0:
            raise ValueError("separation_min must be nonnegative")
        if self.x_box is None and self.x_points is None:
            raise ValueError("region needs x_box or x_points")
        if self.y_box is None and self.y_points is None:
            raise ValueError("region needs y_box or y_points")

    @property
    def dim(self):
        src = self.x_points if self.x_points is not None else self.x_box
        return np.asarray(src).shape[-1] if self.x_points is not None else len(self.x_box)

    def _cloud(self, box, points, salt):
        if points is not None:
            return np.atleast_2d(np.asarray(points, dtype=float))
        box = np.asarray(box, dtype=float)
        n = box.shape[0]
        axes = [np.linspace(lo, hi, self.n_grid) for lo, hi in box]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
        if self.n_quasi == 0:
            return grid
        halton = qmc.Halton(d=n, scramble=True, seed=self.seed + salt)
        quasi = qmc.scale(halton.random(self.n_quasi), box[:, 0], box[:, 1])
        return np.vstack([grid, quasi])

    def x_samples(self):
        return self._cloud(self.x_box, self.x_points, 1)

    def y_samples(self):
        return self._cloud(self.y_box, self.y_points, 2)

    def pairs(self):
        """All (x, y) pairs, randomly thinned to ``max_pairs``."""
        xs, ys = self.x_samples(), self.y_samples()
        ii, jj = np.meshgrid(np.arange(len(xs)), np.arange(len(ys)), indexing="ij")
        ii, jj = ii.ravel(), jj.ravel()
        if len(ii) > self.max_pairs:
            rng = np.random.default_rng(self.seed)
            keep = np.sort(rng.choice(len(ii), self.max_pairs, replace=False))
            ii, jj = ii[keep], jj[keep]
        return xs[ii], ys[jj]

    def to_dict(self):
        def arr(a):
            return None if a is None else np.asarray(a).tolist()
        return {"x_box": arr(self.x_box), "y_box": arr(self.y_box),
                "x_points": len(self.x_points) if self.x_points is not None else None,
                "y_points": len(self.y_points) if self.y_points is not None else None,
                "n_grid": self.n_grid, "n_quasi": self.n_quasi, "n_frames": self.n_frames,
                "separation_min": self.separation_min, "seed": self.seed,
                "max_pairs": self.max_pairs}


@dataclass
class ConditionReport:
    condition: str
    verdict: str
    extremal_value: float
    witness: dict | None
    samples_used: int
    samples_skipped: int = 0
    notes: list = field(default_factory=list)
    resolution: dict | None = None

    def to_dict(self):
        return {"condition": self.condition, "verdict": self.verdict,
                "extremal_value": _num(self.extremal_value), "witness": self.witness,
                "samples_used": int(self.samples_used), "samples_skipped": int(self.samples_skipped),
                "notes": list(self.notes), "resolution": self.resolution}


def _num(v):
    if v is None or not np.isfinite(v):
        return None
    return float(v)


def _listify(**kw):
    return {k: np.asarray(v, dtype=float).tolist() for k, v in kw.items()}


# --------------------------------------------------------------------------
# MTW tensor

def mtw_form(bundle) -> np.ndarray:
    """The 4-tensor S[i, j, k, l] with F = S_ijkl xi_i xi_j eta_k eta_l.

    S = (c_{ij,rs} - c^{k',l'} c_{ij,k'} c_{l',rs}) c^{r,k} c^{s,l}; the
    eta indices k, l are the p-slots.
    """
    inv = bundle.c_xy_inv
    t = bundle.c_xxyy - np.einsum("...ijk,...kl,...lrs->...ijrs", bundle.c_xxy, inv, bundle.c_xyy)
    return np.einsum("...ijrs,...rk,...sl->...ijkl", t, inv, inv)


def _contract(s, xi, eta):
    return np.einsum("...ijkl,...i,...j,...k,...l->...", s, xi, xi, eta, eta)


def mtw_tensor(model: CostModel, x, y, xi, eta):
    """F(x, p; xi, eta) with p = c_x(x, y).

    Raises SingularMixedHessian where c_xy is singular.
    """
    b = derivative_bundle(model, x, y, order=4)
    val = _contract(mtw_form(b), np.asarray(xi, float), np.asarray(eta, float))
    return float(val) if np.ndim(val) == 0 else val


def orthonormal_frames(n, count, seed=0):
    """Unit pairs (xi, eta) with xi . eta = 0, as two ``(count, n)`` arrays.

    Axis-aligned pairs come first, then random rotations; orthogonality is
    enforced by Gram-Schmidt.
    """
    if n < 2:
        return np.zeros((0, n)), np.zeros((0, n))
    rng = np.random.default_rng(seed)
    xis, etas = [], []
    for a in range(n):
        for b in range(n):
            if a != b:
                e1, e2 = np.zeros(n), np.zeros(n)
                e1[a], e2[b] = 1.0, 1.0
                xis.append(e1)
                etas.append(e2)
    for _ in range(max(count - len(xis), 0)):
        q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        xi = q[:, 0]
        eta = q[:, 1] - (q[:, 1] @ xi) * xi
        xis.append(xi / np.linalg.norm(xi))
        etas.append(eta / np.linalg.norm(eta))
    return np.array(xis), np.array(etas)


def _admissible_pairs(model, region):
    x, y = region.pairs()
    ok = costs.valid_pairs(model, x, y)
    if region.separation_min > 0:
        ok &= np.linalg.norm(x - y, axis=-1) >= region.separation_min
    return x, y, ok


def _frame_min(s, xis, etas):
    """Per-pair minimum of F over the frames and the attaining frame index."""
    vals = np.einsum("pijkl,fi,fj,fk,fl->pf", s, xis, xis, etas, etas)
    vals = np.where(np.isfinite(vals), vals, np.inf)
    idx = np.argmin(vals, axis=1)
    return vals[np.arange(len(vals)), idx], idx


def _skew(theta, n):
    k = np.zeros((n, n))
    k[np.triu_indices(n, 1)] = theta
    return k - k.T


def _refine_frame(s, xi, eta):
    """Local minimum of F over orthonormal pairs, started from (xi, eta)."""
    n = len(xi)
    q0, _ = np.linalg.qr(np.column_stack([xi, eta, np.eye(n)]))
    q0[:, 0], q0[:, 1] = xi, eta  # QR fixes the complement; only the signs of the first two differ

    def frame(theta):
        q = expm(_skew(theta, n)) @ q0
        return q[:, 0], q[:, 1]

    def fun(theta):
        a, b = frame(theta)
        return float(_contract(s, a, b))

    res = minimize(fun, np.zeros(n * (n - 1) // 2), method="BFGS", options={"gtol": 1e-12})
    a, b = frame(res.x)
    val = float(_contract(s, a, b))
    start = float(_contract(s, xi, eta))
    return (val, a, b) if val < start else (start, xi, eta)


def check_A3w(model: CostModel, region: SampleRegion, delta: float = 0.0,
              report_tol: float = REPORT_TOL) -> ConditionReport:
    """Sampled test of F - delta |xi|^2 |eta|^2 >= 0 over xi perpendicular to eta."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    name = "A3w" if delta == 0 else f"A3({delta:g})"
    res = region.to_dict()
    x, y, ok = _admissible_pairs(model, region)
    n = x.shape[-1]
    if n == 1:
        return ConditionReport(name, "holds" if delta == 0 else "inconclusive", 0.0, None, int(ok.sum()),
                               int((~ok).sum()), ["n = 1: no orthogonal pairs exist, condition is vacuous"],
                               res)
    xs, ys = x[ok], y[ok]
    skipped = int((~ok).sum())
    if len(xs):
        b = derivative_bundle(model, xs, ys, order=4, strict=False)
        good = ~b.singular
        skipped += int((~good).sum())
        xs, ys = xs[good], ys[good]
        s = mtw_form(b)[good]
    if len(xs) == 0:
        return ConditionReport(name, "inconclusive", float("nan"), None, 0, skipped,
                               ["every sample was inadmissible"], res)
    xis, etas = orthonormal_frames(n, region.n_frames, region.seed)
    vals, fidx = _frame_min(s, xis, etas)
    frames = {}
    # polish the frame at the most negative pairs so the extremum does not depend on frame sampling
    for k in np.argsort(vals)[:REFINE_PAIRS]:
        vals[k], a, b = _refine_frame(s[k], xis[fidx[k]], etas[fidx[k]])
        frames[int(k)] = (a, b)
    vals = vals - delta
    k = int(np.argmin(vals))
    ext = float(vals[k])
    xi_k, eta_k = frames.get(k, (xis[fidx[k]], etas[fidx[k]]))
    p = costs.derivative_bundle(model, xs[k], ys[k], order=1).c_x
    witness = _listify(x=xs[k], y=ys[k], p=p, xi=xi_k, eta=eta_k)
    verdict = "holds" if ext >= -report_tol else "fails"
    return ConditionReport(name, verdict, ext, witness, len(xs), skipped,
                           [P_RANGE_NOTE, f"{len(xis)} orthonormal frames per pair, refined at the {REFINE_PAIRS} lowest pairs",
                            "sampled certification, not a proof"], res)


def check_A1(model: CostModel, region: SampleRegion) -> ConditionReport:
    """Round-trip Y(x, c_x(x, y)) = y and X(c_y(x, y), y) = x at every sample.

    Extra ``region.p_samples`` are tried against every x sample; a failed
    inversion there is an A1 failure witness.
    """
    res = region.to_dict()
    x, y, ok = _admissible_pairs(model, region)
    xs, ys = x[ok], y[ok]
    skipped = int((~ok).sum())
    worst, witness = 0.0, None
    failed = False
    if len(xs):
        b = derivative_bundle(model, xs, ys, order=1, strict=False)
        yy, oky = costs.solve_Y(model, xs, b.c_x, strict=False)
        xx, okx = costs.solve_X(model, b.c_y, ys, strict=False)
        err = np.maximum(np.linalg.norm(yy - ys, axis=-1), np.linalg.norm(xx - xs, axis=-1))
        err = np.where(oky & okx, err, np.inf)
        k = int(np.argmax(err))
        worst = float(err[k])
        if worst > ROUNDTRIP_TOL:
            failed = True
            witness = _listify(x=xs[k], y=ys[k], p=b.c_x[k])
    if region.p_samples is not None and not failed:
        ps = np.atleast_2d(np.asarray(region.p_samples, dtype=float))
        xg = region.x_samples()
        xa = np.repeat(xg, len(ps), axis=0)
        pa = np.tile(ps, (len(xg), 1))
        ya, oka = costs.solve_Y(model, xa, pa, strict=False)
        if np.any(oka):
            resid = np.full(len(xa), np.inf)
            bb = derivative_bundle(model, xa[oka], ya[oka], order=1, strict=False)
            resid[oka] = np.linalg.norm(bb.c_x - pa[oka], axis=-1)
        else:
            resid = np.full(len(xa), np.inf)
        k = int(np.argmax(resid))
        if resid[k] > ROUNDTRIP_TOL:
            failed = True
            worst = float(resid[k])
            witness = _listify(x=xa[k], p=pa[k])
        xs = np.vstack([xs, xa]) if len(xs) else xa
    if len(xs) == 0:
        return ConditionReport("A1", "inconclusive", float("nan"), None, 0, skipped,
                               ["every sample was inadmissible"], res)
    return ConditionReport("A1", "fails" if failed else "holds", worst, witness, len(xs), skipped,
                           ["extremal_value is the worst round-trip error"], res)


def check_A2(model: CostModel, region: SampleRegion) -> ConditionReport:
    """Minimum of |det c_xy| over admissible samples; coincident pairs count."""
    res = region.to_dict()
    x, y = region.pairs()
    ok = costs.valid_pairs(model, x, y)
    coincident = np.all(x == y, axis=-1)
    if region.separation_min > 0:
        ok &= np.linalg.norm(x - y, axis=-1) >= region.separation_min
    use = ok | coincident
    xs, ys = x[use], y[use]
    if len(xs) == 0:
        return ConditionReport("A2", "inconclusive", float("nan"), None, 0, int((~use).sum()),
                               ["every sample was inadmissible"], res)
    b = derivative_bundle(model, xs, ys, order=2, strict=False)
    det = np.where(b.singular, 0.0, np.abs(b.det_c_xy))
    k = int(np.argmin(det))
    verdict = "fails" if b.singular[k] else "holds"
    witness = _listify(x=xs[k], y=ys[k]) if verdict == "fails" else None
    return ConditionReport("A2", verdict, float(det[k]), witness, len(xs), int((~use).sum()),
                           ["extremal_value is min |det c_xy|"], res)


# --------------------------------------------------------------------------
# Classification tables

def expected_power_verdict(m: float, sign: int) -> str:
    """Known A3w classification for c = (sign/m)|x - y|^m."""
    if m == 2 or (-2 <= m < 1 and sign == 1):
        return "holds"
    return "fails"


def power_region(n_grid=9, n_quasi=200, n_frames=16, seed=0) -> SampleRegion:
    return SampleRegion(x_box=np.array([[0.0, 1.0], [0.0, 1.0]]),
                        y_box=np.array([[2.0, 3.0], [0.0, 1.0]]),
                        n_grid=n_grid, n_quasi=n_quasi, n_frames=n_frames,
                        separation_min=1.0, seed=seed)


def classify_power_costs(m_list, signs=(1, -1), region: SampleRegion | None = None):
    """A3w verdict table for the power costs, one row per (m, sign)."""
    region = region or power_region()
    rows = []
    for m in m_list:
        for sign in signs:
            model = CostModel("power", {"m": float(m), "sign": int(sign)}, sep_min=region.separation_min)
            rep = check_A3w(model, region)
            expected = expected_power_verdict(float(m), int(sign))
            rows.append({"m": float(m), "sign": int(sign), "verdict": rep.verdict,
                         "expected": expected, "match": rep.verdict == expected,
                         "extremal_value": _num(rep.extremal_value), "witness": rep.witness,
                         "samples_used": rep.samples_used})
    return rows


def _radial_min(model, s, n_angles):
    """Min of F over frames for |x - y|^2 = s (radial costs depend on s only)."""
    th = np.linspace(0.0, np.pi, n_angles, endpoint=False)
    xi = np.stack([np.cos(th), np.sin(th)], axis=-1)
    eta = np.stack([-np.sin(th), np.cos(th)], axis=-1)
    y = np.array([np.sqrt(s), 0.0])
    b = derivative_bundle(model, np.zeros(2), y, order=4)
    return float(np.min(np.einsum("ijkl,fi,fj,fk,fl->f", mtw_form(b), xi, xi, eta, eta)))


def compound_threshold(p: float, s_max: float = 30.0, n_scan: int = 300, resolution: float = 1e-3,
                       n_angles: int = 72, report_tol: float = REPORT_TOL):
    """Smallest |x - y|^2 where A3w fails for the compound power cost.

    Scans s on a grid, then bisects the first sign change to ``resolution``.
    Returns a dict with ``threshold`` set to None when no failure is found.
    """
    model = CostModel("power_compound", {"p": float(p)})
    grid = np.linspace(s_max / n_scan, s_max, n_scan)
    mins = np.array([_radial_min(model, s, n_angles) for s in grid])
    bad = np.nonzero(mins < -report_tol)[0]
    out = {"p": float(p), "s_max": s_max, "scan_points": n_scan, "resolution": resolution,
           "expected": (1.0 / (p - 1.0)) if p > 1 else None,
           "min_over_scan": float(mins.min())}
    if len(bad) == 0:
        out["threshold"] = None
        return out
    k = bad[0]
    if k == 0:
        out["threshold"] = float(grid[0])
        return out
    lo, hi = grid[k - 1], grid[k]
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if _radial_min(model, mid, n_angles) < -report_tol:
            hi = mid
        else:
            lo = mid
    out["threshold"] = float(0.5 * (lo + hi))
    return out
