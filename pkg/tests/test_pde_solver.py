from __future__ import annotations

import numpy as np
import pytest

from mtwkit.cost_models import CostModel, evaluate
from mtwkit.errors import DomainViolation, EllipticityLost, LinearSolveFailure, SeedFailure
from mtwkit.geometry import disk, interval
from mtwkit.pde_solver import (continuation_solve, field_from_u, initial_guess, make_problem, map_T,
                               newton_step, residual)

QUAD = CostModel("quadratic")


def quad_problem(n=2, h=0.125):
    dom = disk([0, 0], 1, h) if n == 2 else interval(0, 1, h)
    return make_problem(QUAD, dom, dom)


# --------------------------------------------------------------------------
# residual

@pytest.mark.parametrize("n", [1, 2])
def test_residual_vanishes_for_the_identity_potential(n):
    P = quad_problem(n)
    x = P.omega.nodes
    R = residual(P, field_from_u(P, 0.5 * np.sum(x * x, axis=1)), 1.0, 0.0)
    assert np.abs(R[:P.omega.n_interior]).max() <= 1e-10


@pytest.mark.parametrize("n", [1, 2])
def test_residual_of_the_doubled_potential(n):
    P = quad_problem(n)
    x = P.omega.nodes
    R = residual(P, field_from_u(P, np.sum(x * x, axis=1)), 1.0, 0.0)
    np.testing.assert_allclose(R[:P.omega.n_interior], 2**n - 1, atol=1e-9)


def test_residual_rejects_non_elliptic_fields():
    P = quad_problem()
    x = P.omega.nodes
    with pytest.raises(EllipticityLost):
        residual(P, field_from_u(P, -0.5 * np.sum(x * x, axis=1)), 1.0, 0.0)


def test_residual_is_gauge_invariant():
    P = quad_problem()
    x = P.omega.nodes
    u = 0.5 * np.sum(x * x, axis=1) + 0.05 * x[:, 0] ** 3
    a = residual(P, field_from_u(P, u), 1.0, 0.0)
    b = residual(P, field_from_u(P, u + 3.7), 1.0, 0.0)
    np.testing.assert_allclose(a, b, atol=1e-12)


# --------------------------------------------------------------------------
# newton_step

def test_newton_converges_from_a_perturbed_potential():
    P = quad_problem(1, 0.05)
    x = P.omega.nodes[:, 0]
    field = field_from_u(P, 0.5 * x**2 + 0.01 * np.sin(np.pi * x))
    for steps in range(1, 9):
        field = newton_step(P, field)
        if np.abs(residual(P, field, 1.0, 0.0)).max() <= 1e-10:
            break
    assert steps <= 8
    err = field.u - 0.5 * x**2
    assert np.ptp(err) <= 1e-9


def test_newton_leaves_an_exact_solution_unchanged():
    P = quad_problem(1, 0.05)
    x = P.omega.nodes[:, 0]
    field = field_from_u(P, 0.5 * x**2)
    np.testing.assert_allclose(newton_step(P, field).u, field.u, atol=1e-10)


def test_newton_rejects_singular_w():
    P = quad_problem(1, 0.05)
    x = P.omega.nodes[:, 0]
    u = 0.5 * np.where(x < 0.5, x**2, 0.25 + (x - 0.5) * 1.0)
    with pytest.raises(LinearSolveFailure):
        newton_step(P, field_from_u(P, u))


def test_newton_decreases_the_residual():
    P = quad_problem(2, 0.125)
    x = P.omega.nodes
    field = field_from_u(P, 0.5 * np.sum(x * x, axis=1) + 0.02 * np.sin(2 * x[:, 0]) * np.cos(x[:, 1]))
    r0 = np.linalg.norm(residual(P, field, 1.0, 0.0))
    new = newton_step(P, field)
    assert np.linalg.norm(residual(P, new, 1.0, 0.0)) < r0
    assert new.min_eig_w > 0


# --------------------------------------------------------------------------
# map_T

def test_quadratic_map_is_the_gradient():
    P = quad_problem()
    x = P.omega.nodes
    field = field_from_u(P, 0.3 * np.sum(x * x, axis=1) + 0.1 * x[:, 0])
    T, inside = map_T(P, field)
    np.testing.assert_allclose(T, field.Du, atol=1e-14)
    assert inside.all()


def test_c_function_maps_to_its_generator():
    # exact up to the second-order gradient stencil
    model = CostModel("sqrt_plus")
    y0 = np.array([0.6, 0.1])
    errs = []
    for h in (0.125, 0.0625):
        om = disk([0, 0], 1, h)
        P = make_problem(model, om, disk([0.5, 0], 0.5, h), g=4.0)
        T, inside = map_T(P, field_from_u(P, evaluate(model, om.nodes, y0) + 0.7))
        assert inside.all()
        errs.append(np.abs(T - y0).max())
        assert errs[-1] <= 2 * h**2
    assert errs[0] / errs[1] >= 3


def test_inadmissible_gradient_raises():
    model = CostModel("sqrt_plus")
    P = make_problem(model, disk([0, 0], 1, 0.25), disk([3, 0], 1, 0.25))
    with pytest.raises(DomainViolation):
        field_from_u(P, 2.0 * P.omega.nodes[:, 0])


# --------------------------------------------------------------------------
# seeds

def test_quadratic_seed_is_a_scaled_identity():
    P = quad_problem()
    field, kind = initial_guess(P)
    assert kind.startswith("quadratic")
    x = P.omega.nodes
    # T = kappa (x - x0) + y0 with x0, y0 the node centroids
    A = np.column_stack([x[:, 0], np.ones(len(x))])
    (kappa, b), *_ = np.linalg.lstsq(A, field.T[:, 0], rcond=None)
    np.testing.assert_allclose(field.T, kappa * x + field.T.mean(0) - kappa * x.mean(0), atol=1e-10)
    assert 0 < kappa < 1 and field.min_eig_w > 0


def test_sqrt_plus_seed_has_admissible_gradient():
    P = make_problem(CostModel("sqrt_plus"), disk([0, 0], 1, 0.125), disk([0.5, 0], 0.5, 0.125), g=4.0)
    field, _ = initial_guess(P)
    assert np.linalg.norm(field.Du, axis=1).max() < 1
    assert field.min_eig_w > 0
    assert np.all(P.omega_star.distance(field.T) > 0)


def test_tiny_target_is_a_seed_failure():
    om = disk([0, 0], 1, 0.125)
    P = make_problem(QUAD, om, disk([0, 0], 0.1, 0.05), g=100.0)
    with pytest.raises(SeedFailure):
        initial_guess(P)


# --------------------------------------------------------------------------
# continuation

def test_quadratic_disk_solution_is_the_identity(quad_disk_problem, quad_disk_solution):
    h = quad_disk_problem.omega.h
    T, _ = map_T(quad_disk_problem, quad_disk_solution.field)
    assert np.abs(T - quad_disk_problem.omega.nodes).max() <= 2 * h


def test_trace_preserves_ellipticity(quad_disk_solution, sqrt_plus_1d_solution):
    for res in (quad_disk_solution, sqrt_plus_1d_solution):
        accepted = [r for r in res.trace if "rejected" not in r]
        assert all(r["min_eig_w"] > 0 for r in accepted)
        for r in accepted[1:]:
            hist = r["residual_history"]
            assert all(b < a for a, b in zip(hist, hist[1:]))


def test_solution_is_mean_zero(quad_disk_problem, quad_disk_solution):
    w = quad_disk_problem.omega.weights
    assert abs(np.average(quad_disk_solution.field.u, weights=w)) <= 1e-12


def test_sqrt_plus_disk_pair_solves():
    om, os_ = disk([0, 0], 1, 0.125), disk([0.5, 0], 0.5, 0.125)
    P = make_problem(CostModel("sqrt_plus"), om, os_, g=om.volume / os_.volume)
    res = continuation_solve(P)
    T, inside = map_T(P, res.field)
    assert res.converged and res.field.min_eig_w > 0
    assert inside.all()
