"""Sparse first- and second-derivative operators on domain nodes.

Rows follow ``domain.nodes`` (interior first, then boundary).  Interior grid
nodes with a full axis/diagonal neighbourhood get centered differences;
everything else (nodes next to the curved boundary and the boundary nodes
themselves) gets a weighted least-squares quadratic fit.  In 1D the
boundary uses second-order one-sided formulas.  Every row sums to zero so
constants are annihilated.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .geometry import DomainSpec

FIT_NEIGHBOURS = {2: 21, 3: 33}
FIT_WIDTH = 1.0


@dataclass
class Stencils:
    """``grad[k]`` and ``hess[(a, b)]`` (a <= b) as CSR matrices."""

    grad: list
    hess: dict
    n_centered: int
    n_fitted: int

    def D(self, u):
        return np.stack([g @ u for g in self.grad], axis=-1)

    def D2(self, u):
        n = len(self.grad)
        out = np.empty((len(u), n, n))
        for (a, b), m in self.hess.items():
            out[:, a, b] = out[:, b, a] = m @ u
        return out

    def hess_ab(self, a, b):
        return self.hess[(min(a, b), max(a, b))]


def _zero_rows(mats):
    """Move each row's roundoff sum onto its diagonal entry."""
    out = []
    for m in mats:
        m = m.tocsr()
        s = np.asarray(m.sum(axis=1)).ravel()
        out.append((m - sparse.diags(s)).tocsr())
    return out


def _build_1d(domain: DomainSpec):
    h = domain.h
    xs = domain.nodes[:, 0]
    order = np.argsort(xs)
    m = len(xs) - 1
    pos = np.empty(m + 1, dtype=int)
    pos[np.arange(m + 1)] = order  # pos[k] = node index of the k-th point from the left
    g = sparse.lil_matrix((m + 1, m + 1))
    hh = sparse.lil_matrix((m + 1, m + 1))
    for k in range(m + 1):
        row = pos[k]
        if 0 < k < m:
            g[row, pos[k - 1]], g[row, pos[k + 1]] = -0.5 / h, 0.5 / h
            hh[row, pos[k - 1]], hh[row, pos[k]], hh[row, pos[k + 1]] = 1 / h**2, -2 / h**2, 1 / h**2
        else:
            sgn = 1 if k == 0 else -1
            idx = [pos[k + sgn * j] for j in range(4)]
            for j, c in zip(idx[:3], (-1.5, 2.0, -0.5)):
                g[row, j] += sgn * c / h
            for j, c in zip(idx, (2.0, -5.0, 4.0, -1.0)):
                hh[row, j] += c / h**2
    grad, hess2 = _zero_rows([g, hh])
    return Stencils([grad], {(0, 0): hess2}, m - 1, 2)


def _monomials(n):
    pairs = list(combinations_with_replacement(range(n), 2))
    return pairs


def _fit_rows(center, neigh_pts, h, n):
    """Weights mapping neighbour values to (gradient, Hessian) at center."""
    d = (neigh_pts - center) / h
    pairs = _monomials(n)
    cols = [np.ones(len(d))] + [d[:, k] for k in range(n)] + [d[:, a] * d[:, b] for a, b in pairs]
    V = np.stack(cols, axis=-1)
    w = np.exp(-0.5 * np.sum(d * d, axis=-1) / FIT_WIDTH**2)
    Vw = V * w[:, None]
    P = np.linalg.solve(Vw.T @ V, Vw.T)
    grad = P[1:1 + n] / h
    hess = {}
    for r, (a, b) in enumerate(pairs):
        coef = P[1 + n + r] / h**2
        hess[(a, b)] = 2.0 * coef if a == b else coef
    return grad, hess


def build_stencils(domain: DomainSpec) -> Stencils:
    n = domain.dim
    if n == 1:
        return _build_1d(domain)
    nodes = domain.nodes
    N = len(nodes)
    h = domain.h
    tree = cKDTree(nodes)
    pairs = _monomials(n)
    n_basis = 1 + n + len(pairs)
    k_fit = min(N, FIT_NEIGHBOURS.get(n, 2 * n_basis))
    rows_g = [[] for _ in range(n)]
    rows_h = {p: [] for p in pairs}
    n_centered = 0

    def add(store, i, cols, vals):
        store.append((np.full(len(cols), i), np.asarray(cols), np.asarray(vals)))

    interior = domain.interior_nodes
    for i in range(N):
        x = nodes[i]
        centered = None
        if i < domain.n_interior:
            offs = {}
            ok = True
            for a in range(n):
                for sgn in (1, -1):
                    e = np.zeros(n)
                    e[a] = sgn * h
                    dist, j = tree.query(x + e)
                    if dist > 1e-9 * h or j >= domain.n_interior:
                        ok = False
                    offs[(a, sgn)] = j
            diag = {}
            if ok:
                for a, b in pairs:
                    if a == b:
                        continue
                    for sa in (1, -1):
                        for sb in (1, -1):
                            e = np.zeros(n)
                            e[a], e[b] = sa * h, sb * h
                            dist, j = tree.query(x + e)
                            if dist > 1e-9 * h or j >= domain.n_interior:
                                ok = False
                            diag[(a, b, sa, sb)] = j
            if ok:
                centered = (offs, diag)
        if centered is not None:
            n_centered += 1
            offs, diag = centered
            for a in range(n):
                add(rows_g[a], i, [offs[(a, 1)], offs[(a, -1)]], [0.5 / h, -0.5 / h])
                add(rows_h[(a, a)], i, [offs[(a, 1)], i, offs[(a, -1)]], [1 / h**2, -2 / h**2, 1 / h**2])
            for a, b in pairs:
                if a == b:
                    continue
                cols = [diag[(a, b, 1, 1)], diag[(a, b, -1, -1)], diag[(a, b, 1, -1)], diag[(a, b, -1, 1)]]
                q = 0.25 / h**2
                add(rows_h[(a, b)], i, cols, [q, q, -q, -q])
        else:
            _, idx = tree.query(x, k=k_fit)
            idx = np.atleast_1d(idx)
            grad, hess = _fit_rows(x, nodes[idx], h, n)
            for a in range(n):
                add(rows_g[a], i, idx, grad[a])
            for p in pairs:
                add(rows_h[p], i, idx, hess[p])
    del interior

    def assemble(store):
        r = np.concatenate([s[0] for s in store])
        c = np.concatenate([s[1] for s in store])
        v = np.concatenate([s[2] for s in store])
        return sparse.csr_matrix((v, (r, c)), shape=(N, N))

    grad = _zero_rows([assemble(rows_g[a]) for a in range(n)])
    hess_list = _zero_rows([assemble(rows_h[p]) for p in pairs])
    return Stencils(grad, dict(zip(pairs, hess_list)), n_centered, N - n_centered)
