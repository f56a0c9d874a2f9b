"""Sampled domains, their defining functions and c-/c*-convexity checks.

A domain carries interior nodes on a Cartesian grid of spacing h, boundary
nodes lying exactly on the boundary with unit outward normals, quadrature
weights, and the defining function ``phi = -a d + b d^2`` where d is the
distance to the boundary (positive inside).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import shapely
from scipy.spatial import ConvexHull, cKDTree

from . import cost_models as costs
from .cost_models import CostModel, derivative_bundle
from .errors import BadGeometry, DomainViolation

C_TOL = 1e-6
MAX_PARTNER_SAMPLES = 400
BALL_KINDS = ("interval", "disk", "ball")
KINDS = BALL_KINDS + ("ellipse", "point_cloud")


@dataclass
class DomainSpec:
    """A bounded domain sampled at spacing ``h``.

    Attributes:
        kind: one of ``interval``, ``disk``, ``ball``, ``ellipse``, ``point_cloud``.
        center: center point (ball types and ellipses).
        radii: radius (ball types) or semi-axes (ellipse), as an array.
        h: node spacing.
        interior_nodes: ``(N_i, n)`` array.
        boundary_nodes: ``(N_b, n)`` array, exactly on the boundary.
        normals: unit outward normals at the boundary nodes.
        shape_operator: ``(N_b, n, n)`` array D_i gamma_j at boundary nodes.
        weights: quadrature weights for ``nodes`` (interior then boundary).
        defining: ``(a, b)`` of the defining function.
    """

    kind: str
    center: np.ndarray
    radii: np.ndarray
    h: float
    interior_nodes: np.ndarray
    boundary_nodes: np.ndarray
    normals: np.ndarray
    shape_operator: np.ndarray
    weights: np.ndarray
    defining: tuple
    polygon: np.ndarray | None = None
    notes: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.boundary_nodes.shape[-1]

    @property
    def nodes(self) -> np.ndarray:
        return np.vstack([self.interior_nodes, self.boundary_nodes])

    @property
    def n_interior(self) -> int:
        return len(self.interior_nodes)

    @property
    def is_ball(self) -> bool:
        return self.kind in BALL_KINDS

    @property
    def radius(self) -> float:
        return float(self.radii[0])

    @property
    def volume(self) -> float:
        return float(np.sum(self.weights))

    def distance(self, y) -> np.ndarray:
        """Signed distance to the boundary, positive inside."""
        y = np.asarray(y, dtype=float)
        if self.is_ball:
            return self.radius - np.linalg.norm(y - self.center, axis=-1)
        if self.kind == "ellipse":
            foot, _ = _ellipse_foot(y - self.center, self.radii)
            dist = np.linalg.norm(y - self.center - foot, axis=-1)
            q = (y - self.center) / self.radii
            return np.where(np.einsum("...i,...i->...", q, q) <= 1.0, dist, -dist)
        poly = shapely.Polygon(self.polygon)
        pts = shapely.points(y.reshape(-1, 2))
        dist = shapely.distance(poly.exterior, pts)
        inside = shapely.contains_xy(poly, y.reshape(-1, 2)[:, 0], y.reshape(-1, 2)[:, 1])
        return np.where(inside, dist, -dist).reshape(y.shape[:-1])

    def distance_grad(self, y) -> np.ndarray:
        """Gradient of :meth:`distance` (minus the outward normal of the foot point)."""
        y = np.asarray(y, dtype=float)
        if self.is_ball:
            r = y - self.center
            norm = np.linalg.norm(r, axis=-1, keepdims=True)
            return -r / np.where(norm > 0, norm, 1.0)
        if self.kind == "ellipse":
            _, t = _ellipse_foot(y - self.center, self.radii)
            return -_ellipse_normal(t, self.radii)
        eps = 1e-6 * self.h
        out = np.zeros(y.shape)
        for k in range(2):
            e = np.zeros(2)
            e[k] = eps
            out[..., k] = (self.distance(y + e) - self.distance(y - e)) / (2 * eps)
        return out

    def phi(self, y) -> np.ndarray:
        a, b = self.defining
        d = self.distance(y)
        return -a * d + b * d * d

    def phi_grad(self, y) -> np.ndarray:
        a, b = self.defining
        d = self.distance(y)
        return (-a + 2.0 * b * d)[..., None] * self.distance_grad(y)

    def contains(self, y, tol=0.0) -> np.ndarray:
        return self.distance(y) >= -tol

    def to_dict(self):
        return {"kind": self.kind, "center": self.center.tolist(), "radii": self.radii.tolist(),
                "h": self.h, "n_interior": self.n_interior, "n_boundary": len(self.boundary_nodes),
                "defining": list(self.defining), "notes": list(self.notes)}


# --------------------------------------------------------------------------
# Construction

def _grid_inside(center, half_extent, h, dist_fn):
    n = len(center)
    k = int(np.floor(np.max(half_extent) / h + 1e-9))
    axes = [center[i] + h * np.arange(-k, k + 1) for i in range(n)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    return grid[dist_fn(grid) >= 0.5 * h]


def _fine_weights(nodes, h, dist_fn, center, half_extent, volume):
    """Volume of the cells nearest to each node, from a fine subgrid."""
    n = nodes.shape[-1]
    sub = 8 if n == 2 else 4
    hf = h / sub
    k = int(np.ceil(np.max(half_extent) / hf))
    axes = [center[i] + hf * (np.arange(-k, k + 1)) for i in range(n)]
    fine = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    fine = fine[dist_fn(fine) >= 0]
    _, owner = cKDTree(nodes).query(fine)
    counts = np.bincount(owner, minlength=len(nodes)).astype(float)
    return counts * volume / counts.sum()


def _ball(kind, center, radius, h, defining):
    center = np.atleast_1d(np.asarray(center, dtype=float))
    n = len(center)
    expected = {"interval": 1, "disk": 2, "ball": 3}[kind]
    if n != expected:
        raise BadGeometry(f"{kind} needs a center of dimension {expected}")
    if not radius > 0:
        raise BadGeometry("radius must be positive")
    if not h > 0:
        raise BadGeometry("h must be positive")
    if defining is None:
        defining = (1.0, 1.0 / (2.0 * radius))

    def dist(y):
        return radius - np.linalg.norm(y - center, axis=-1)

    if n == 1:
        m = max(2, int(round(2 * radius / h)))
        h = 2 * radius / m
        pts = center[0] - radius + h * np.arange(m + 1)
        interior = pts[1:-1, None]
        boundary = np.array([[pts[0]], [pts[-1]]])
        normals = np.array([[-1.0], [1.0]])
        shape_op = np.zeros((2, 1, 1))
        w = np.full(m + 1, h)
        w[0] = w[-1] = 0.5 * h
        weights = np.concatenate([w[1:-1], w[[0, -1]]])
    else:
        interior = _grid_inside(center, np.full(n, radius), h, dist)
        if n == 2:
            m = max(8, int(round(2 * np.pi * radius / h)))
            th = 2 * np.pi * np.arange(m) / m
            normals = np.stack([np.cos(th), np.sin(th)], axis=-1)
            volume = np.pi * radius**2
        else:
            m = max(12, int(round(4 * np.pi * radius**2 / h**2)))
            i = np.arange(m) + 0.5
            polar = np.arccos(1 - 2 * i / m)
            az = np.pi * (1 + 5**0.5) * i
            normals = np.stack([np.cos(az) * np.sin(polar), np.sin(az) * np.sin(polar), np.cos(polar)], -1)
            volume = 4.0 / 3.0 * np.pi * radius**3
        boundary = center + radius * normals
        shape_op = (np.eye(n) - normals[:, :, None] * normals[:, None, :]) / radius
        if len(interior) == 0:
            raise BadGeometry("domain has no interior nodes at this spacing")
        weights = _fine_weights(np.vstack([interior, boundary]), h, dist, center,
                                np.full(n, radius), volume)
    return DomainSpec(kind, center, np.array([float(radius)]), float(h), interior, boundary,
                      normals, shape_op, weights, tuple(float(v) for v in defining))


def _ellipse_normal(t, radii):
    a, b = radii
    nrm = np.stack([b * np.cos(t), a * np.sin(t)], axis=-1)
    return nrm / np.linalg.norm(nrm, axis=-1, keepdims=True)


def _ellipse_foot(q, radii, iters=40):
    """Closest boundary point to q (relative to the center) and its angle."""
    a, b = radii
    q = np.asarray(q, dtype=float)
    t = np.arctan2(a * q[..., 1], b * q[..., 0])
    for _ in range(iters):
        c, s = np.cos(t), np.sin(t)
        # derivative of 0.5 |(a c, b s) - q|^2 in t and its second derivative
        g = (a * c - q[..., 0]) * (-a * s) + (b * s - q[..., 1]) * (b * c)
        gg = a * a * s * s + b * b * c * c - (a * c - q[..., 0]) * a * c - (b * s - q[..., 1]) * b * s
        gg = np.where(gg > 1e-12, gg, np.maximum(a, b) ** 2)
        t = t - g / gg
    foot = np.stack([a * np.cos(t), b * np.sin(t)], axis=-1)
    return foot, t


def _ellipse(center, semi_axes, h, defining):
    center = np.asarray(center, dtype=float)
    radii = np.asarray(semi_axes, dtype=float)
    if center.shape != (2,) or radii.shape != (2,):
        raise BadGeometry("ellipse needs a 2D center and two semi-axes")
    if np.any(radii <= 0) or not h > 0:
        raise BadGeometry("semi-axes and h must be positive")
    if defining is None:
        defining = (1.0, 0.0)
    a, b = radii
    tt = np.linspace(0, 2 * np.pi, 4097)
    arc = np.concatenate([[0], np.cumsum(np.hypot(np.diff(a * np.cos(tt)), np.diff(b * np.sin(tt))))])
    m = max(8, int(round(arc[-1] / h)))
    t = np.interp(np.arange(m) * arc[-1] / m, arc, tt)
    boundary = center + np.stack([a * np.cos(t), b * np.sin(t)], axis=-1)
    normals = _ellipse_normal(t, radii)
    kappa = a * b / (a * a * np.sin(t) ** 2 + b * b * np.cos(t) ** 2) ** 1.5
    tau = np.stack([-normals[:, 1], normals[:, 0]], axis=-1)
    shape_op = kappa[:, None, None] * tau[:, :, None] * tau[:, None, :]
    dom = DomainSpec("ellipse", center, radii, float(h), np.zeros((0, 2)), boundary, normals,
                     shape_op, np.zeros(0), tuple(float(v) for v in defining))
    interior = _grid_inside(center, radii, h, dom.distance)
    if len(interior) == 0:
        raise BadGeometry("domain has no interior nodes at this spacing")
    dom.interior_nodes = interior
    dom.weights = _fine_weights(dom.nodes, h, dom.distance, center, radii, np.pi * a * b)
    return dom


def _polygon(points, h, defining):
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise BadGeometry("point_cloud boundaries are ordered 2D polygons with at least 3 vertices")
    if not h > 0:
        raise BadGeometry("h must be positive")
    poly = shapely.Polygon(pts)
    if not poly.is_valid or poly.area <= 0:
        raise BadGeometry("polygon is degenerate or self-intersecting")
    poly = shapely.geometry.polygon.orient(poly, 1.0)
    ring = poly.exterior
    m = max(8, int(round(ring.length / h)))
    s = np.arange(m) * ring.length / m
    boundary = np.array([ring.interpolate(v).coords[0] for v in s])
    # tangent and curvature by periodic central differences of the resampled curve
    ds = ring.length / m
    fwd, bwd = np.roll(boundary, -1, axis=0), np.roll(boundary, 1, axis=0)
    tangent = (fwd - bwd) / (2 * ds)
    tangent /= np.linalg.norm(tangent, axis=-1, keepdims=True)
    normals = np.stack([tangent[:, 1], -tangent[:, 0]], axis=-1)
    second = (fwd - 2 * boundary + bwd) / ds**2
    kappa = -np.einsum("ij,ij->i", second, normals)
    shape_op = kappa[:, None, None] * tangent[:, :, None] * tangent[:, None, :]
    if defining is None:
        defining = (1.0, 0.0)
    lo, hi = np.array(poly.bounds[:2]), np.array(poly.bounds[2:])
    center = 0.5 * (lo + hi)
    dom = DomainSpec("point_cloud", center, 0.5 * (hi - lo), float(h), np.zeros((0, 2)), boundary,
                     normals, shape_op, np.zeros(0), tuple(float(v) for v in defining),
                     polygon=np.asarray(ring.coords)[:-1])
    interior = _grid_inside(center, 0.5 * (hi - lo), h, dom.distance)
    if len(interior) == 0:
        raise BadGeometry("domain has no interior nodes at this spacing")
    dom.interior_nodes = interior
    dom.weights = _fine_weights(dom.nodes, h, dom.distance, center, 0.5 * (hi - lo), poly.area)
    dom.notes.append("normals and curvature by finite differences of the resampled boundary")
    return dom


def rounded_square(half_side=1.0, corner=0.25, per_corner=16):
    """Vertices of a square with circular corners (flat faces, zero curvature there)."""
    c = half_side - corner
    pts = []
    for cx, cy, start in ((c, c, 0.0), (-c, c, 0.5 * np.pi), (-c, -c, np.pi), (c, -c, 1.5 * np.pi)):
        th = start + np.linspace(0, 0.5 * np.pi, per_corner)
        pts.append(np.stack([cx + corner * np.cos(th), cy + corner * np.sin(th)], axis=-1))
    return np.vstack(pts)


def build_domain(spec: dict) -> DomainSpec:
    """Build a sampled domain from a spec dict.

    Keys: ``kind``, ``h``, and ``center``/``radius`` (interval, disk, ball),
    ``lo``/``hi`` (interval alternative), ``semi_axes`` (ellipse),
    ``points`` (point_cloud), optional ``defining`` = ``[a, b]``.
    """
    kind = spec.get("kind")
    if kind not in KINDS:
        raise BadGeometry(f"unknown domain kind {kind!r}")
    h = float(spec.get("h", 0.0))
    defining = spec.get("defining")
    if kind in BALL_KINDS:
        if kind == "interval" and "lo" in spec:
            lo, hi = float(spec["lo"]), float(spec["hi"])
            center, radius = [(lo + hi) / 2], (hi - lo) / 2
        else:
            center, radius = spec.get("center"), float(spec.get("radius", 0.0))
        return _ball(kind, center, radius, h, defining)
    if kind == "ellipse":
        return _ellipse(spec["center"], spec["semi_axes"], h, defining)
    return _polygon(spec["points"], h, defining)


def interval(lo, hi, h, defining=None) -> DomainSpec:
    return build_domain({"kind": "interval", "lo": lo, "hi": hi, "h": h, "defining": defining})


def disk(center, radius, h, defining=None) -> DomainSpec:
    return build_domain({"kind": "disk", "center": center, "radius": radius, "h": h, "defining": defining})


# --------------------------------------------------------------------------
# c-convexity

@dataclass
class ConvexityReport:
    delta0_estimate: float
    verdict: str
    witness: dict | None
    samples: int
    which: str = "c"
    notes: list = field(default_factory=list)

    def to_dict(self):
        d0 = self.delta0_estimate
        return {"which": self.which, "verdict": self.verdict,
                "delta0_estimate": float(d0) if np.isfinite(d0) else None,
                "witness": self.witness, "samples": int(self.samples), "notes": list(self.notes)}


def c_image(model: CostModel, domain: DomainSpec, y) -> np.ndarray:
    """The cloud {c_y(x, y) : x a node of the domain}."""
    nodes = domain.nodes
    y = np.broadcast_to(np.asarray(y, dtype=float), nodes.shape)
    if not np.all(costs.valid_pairs(model, nodes, y)):
        raise DomainViolation("some domain node leaves the validity set with this y")
    return derivative_bundle(model, nodes, y, order=1, strict=False).c_y


def hull_defect(cloud, spacing) -> float:
    """Largest distance from the convex hull boundary to the cloud.

    The hull boundary is sampled at ``spacing / 4``; a convex, densely sampled
    cloud gives a defect of order ``spacing``.
    """
    cloud = np.asarray(cloud, dtype=float)
    if cloud.shape[-1] == 1:
        return 0.0
    hull = ConvexHull(cloud)
    tree = cKDTree(cloud)
    worst = 0.0
    for simplex in hull.simplices:
        verts = cloud[simplex]
        if cloud.shape[-1] == 2:
            length = np.linalg.norm(verts[1] - verts[0])
            k = max(2, int(np.ceil(4 * length / spacing)) + 1)
            s = np.linspace(0, 1, k)[:, None]
            samples = verts[0] + s * (verts[1] - verts[0])
        else:
            k = max(2, int(np.ceil(4 * np.max(np.ptp(verts, axis=0)) / spacing)) + 1)
            a, b = np.meshgrid(np.linspace(0, 1, k), np.linspace(0, 1, k))
            keep = a + b <= 1
            a, b = a[keep][:, None], b[keep][:, None]
            samples = verts[0] + a * (verts[1] - verts[0]) + b * (verts[2] - verts[0])
        dist, _ = tree.query(samples)
        worst = max(worst, float(dist.max()))
    return worst


def _partners(domain, seed=0):
    """All nodes, or the boundary plus a seeded subset of the interior."""
    if len(domain.nodes) <= MAX_PARTNER_SAMPLES:
        return domain.nodes
    rng = np.random.default_rng(seed)
    room = max(MAX_PARTNER_SAMPLES - len(domain.boundary_nodes), 0)
    keep = np.sort(rng.choice(domain.n_interior, min(room, domain.n_interior), replace=False))
    return np.vstack([domain.boundary_nodes, domain.interior_nodes[keep]])


def _tangent_min(q, gamma):
    """Min of tau^T Q tau over unit tau perpendicular to gamma, with the minimizer."""
    n = gamma.shape[-1]
    if n == 1:
        return np.full(q.shape[0], np.inf), np.zeros(gamma.shape)
    basis = np.zeros(gamma.shape + (n - 1,))
    for i in range(len(gamma)):
        u, _, _ = np.linalg.svd(gamma[i][:, None])
        basis[i] = u[:, 1:]
    qt = np.einsum("pia,pij,pjb->pab", basis, 0.5 * (q + np.swapaxes(q, -1, -2)), basis)
    vals, vecs = np.linalg.eigh(qt)
    tau = np.einsum("pia,pa->pi", basis, vecs[:, :, 0])
    return vals[:, 0], tau


def _verdict(d0, which):
    star = "cstar" if which == "c*" else "c"
    if d0 > C_TOL:
        return f"uniformly_{star}_convex"
    if d0 >= -C_TOL:
        return f"{star}_convex_degenerate"
    return "fails"


def _convexity(model, boundary_dom, partner_dom, which, seed):
    xb, gam, dgam = boundary_dom.boundary_nodes, boundary_dom.normals, boundary_dom.shape_operator
    partners = _partners(partner_dom, seed)
    nb, npart = len(xb), len(partners)
    bi = np.repeat(np.arange(nb), npart)
    pts_b, pts_p = xb[bi], np.tile(partners, (nb, 1))
    if which == "c":
        x, y = pts_b, pts_p
    else:
        x, y = pts_p, pts_b
    if not np.all(costs.valid_pairs(model, x, y)):
        raise DomainViolation("boundary/partner pair outside the validity set")
    b = derivative_bundle(model, x, y, order=3, strict=False)
    inv = b.c_xy_inv
    g = gam[bi]
    if which == "c":
        q = dgam[bi] - np.einsum("pijl,plk,pk->pij", b.c_xxy, inv, g)
    else:
        q = dgam[bi] - np.einsum("plij,pkl,pk->pij", b.c_xyy, inv, g)
    vals, tau = _tangent_min(q, g)
    vals = np.where(np.isfinite(vals) | (boundary_dom.dim == 1), vals, -np.inf)
    k = int(np.argmin(vals))
    d0 = float(vals[k])
    notes = [f"{nb} boundary nodes x {npart} partner samples; sampled, not universal"]
    if boundary_dom.dim == 1:
        notes.append("n = 1: no tangent directions, condition is vacuous")
        return ConvexityReport(float("inf"), _verdict(np.inf, which), None, len(q), which, notes)
    witness = {"x": x[k].tolist(), "y": y[k].tolist(), "tau": tau[k].tolist()}
    return ConvexityReport(d0, _verdict(d0, which), witness, len(q), which, notes)


def check_uniform_c_convexity(model: CostModel, omega: DomainSpec, omega_star: DomainSpec,
                              seed: int = 0) -> ConvexityReport:
    """Min over boundary x of omega, sampled y in omega_star and unit tangents tau of
    ``[D_i gamma_j - c^{l,k} c_{ij,l} gamma_k] tau_i tau_j``."""
    return _convexity(model, omega, omega_star, "c", seed)


def check_uniform_cstar_convexity(model: CostModel, omega: DomainSpec, omega_star: DomainSpec,
                                  seed: int = 0) -> ConvexityReport:
    """The same form for the boundary of omega_star with the x and y slots swapped."""
    return _convexity(model, omega_star, omega, "c*", seed)


def level_set_gap(model: CostModel, omega: DomainSpec, boundary_index: int, y0, t: float) -> float:
    """max over nodes x != x0 of e(x) - e(x0), with e = c(., y) - c(., y0).

    y = Y(x0, c_x(x0, y0) + t gamma(x0)) lies on the c*-segment through y0 in
    the normal direction; the gap is negative when omega lies strictly on one
    side of the level set of e through x0.
    """
    x0 = omega.boundary_nodes[boundary_index]
    gamma0 = omega.normals[boundary_index]
    y0 = np.asarray(y0, dtype=float)
    p0 = derivative_bundle(model, x0, y0, order=1).c_x
    y = costs.solve_Y(model, x0, p0 + t * gamma0)
    nodes = omega.nodes
    others = nodes[np.linalg.norm(nodes - x0, axis=-1) > 1e-12]
    e = costs.evaluate(model, others, np.broadcast_to(y, others.shape)) - \
        costs.evaluate(model, others, np.broadcast_to(y0, others.shape))
    e0 = costs.evaluate(model, x0, y) - costs.evaluate(model, x0, y0)
    return float(np.max(e - e0))
