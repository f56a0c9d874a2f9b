"""Sparse multivariate polynomials with exact derivatives.

Used for the f, g terms of the ``dot_plus_fg`` cost family and for the
density fields read from problem files.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Polynomial:
    """Sum of monomials ``coef * prod(x_i ** e_i)``.

    A polynomial with no exponent vectors (``terms == ((c, ()),)``) is a
    constant and may be evaluated in any dimension.
    """

    terms: tuple[tuple[float, tuple[int, ...]], ...]

    @classmethod
    def constant(cls, value: float) -> Polynomial:
        return cls(((float(value), ()),))

    @classmethod
    def from_spec(cls, spec) -> Polynomial:
        """Build from a number or ``{"terms": [[coef, [e1, e2, ...]], ...]}``."""
        if isinstance(spec, Polynomial):
            return spec
        if isinstance(spec, (int, float)):
            return cls.constant(spec)
        if isinstance(spec, dict) and "terms" in spec:
            terms = []
            for coef, exps in spec["terms"]:
                exps = tuple(int(e) for e in exps)
                if any(e < 0 for e in exps):
                    raise ValueError("negative exponent in polynomial term")
                terms.append((float(coef), exps))
            if not terms:
                return cls.constant(0.0)
            return cls(tuple(terms))
        raise ValueError(f"cannot interpret polynomial spec {spec!r}")

    def to_spec(self):
        if self.is_constant:
            return sum(c for c, _ in self.terms)
        return {"terms": [[c, list(e)] for c, e in self.terms]}

    @property
    def is_constant(self) -> bool:
        return all(sum(e) == 0 for _, e in self.terms)

    def _exps(self, n):
        out = []
        for coef, e in self.terms:
            if len(e) == 0:
                e = (0,) * n
            if len(e) != n:
                raise ValueError(f"polynomial term {e} does not match dimension {n}")
            out.append((coef, np.array(e, dtype=int)))
        return out

    def _monomial(self, x, e, deriv):
        # derivative of prod x_i^e_i along the multi-index `deriv` (counts per axis)
        factor = 1.0
        val = np.ones(x.shape[:-1])
        for i in range(x.shape[-1]):
            k = deriv[i]
            if k > e[i]:
                return np.zeros(x.shape[:-1])
            for j in range(k):
                factor *= e[i] - j
            p = e[i] - k
            if p:
                val = val * x[..., i] ** p
        return factor * val

    def _eval_deriv(self, x, deriv):
        x = np.asarray(x, dtype=float)
        n = x.shape[-1]
        total = np.zeros(x.shape[:-1])
        for coef, e in self._exps(n):
            total = total + coef * self._monomial(x, e, deriv)
        return total

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self._eval_deriv(x, np.zeros(x.shape[-1], dtype=int))

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        n = x.shape[-1]
        out = np.zeros(x.shape)
        for i in range(n):
            d = np.zeros(n, dtype=int)
            d[i] = 1
            out[..., i] = self._eval_deriv(x, d)
        return out

    def hess(self, x):
        x = np.asarray(x, dtype=float)
        n = x.shape[-1]
        out = np.zeros(x.shape + (n,))
        for i in range(n):
            for j in range(i, n):
                d = np.zeros(n, dtype=int)
                d[i] += 1
                d[j] += 1
                out[..., i, j] = out[..., j, i] = self._eval_deriv(x, d)
        return out

    def scaled(self, factor: float) -> Polynomial:
        return Polynomial(tuple((c * factor, e) for c, e in self.terms))
