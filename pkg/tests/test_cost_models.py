from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtwkit.cost_models import (CostModel, derivative_bundle, evaluate, matrix_A, scalar_B,
                                solve_X, solve_Y, valid_pairs)
from mtwkit.errors import DomainViolation, NoSolution, SingularMixedHessian

DOT_FG = CostModel("dot_plus_fg", {"f": {"terms": [[0.5, [2, 0]], [0.25, [0, 4]]]},
                                   "g": {"terms": [[1.0, [2, 0]], [0.5, [0, 2]]]}})
MODELS = {
    "quadratic": CostModel("quadratic"),
    "sqrt_plus": CostModel("sqrt_plus"),
    "sqrt_minus": CostModel("sqrt_minus"),
    "dot_plus_fg": DOT_FG,
    "power_3_plus": CostModel("power", {"m": 3, "sign": 1}),
    "power_-1_plus": CostModel("power", {"m": -1, "sign": 1}),
    "power_0.5_minus": CostModel("power", {"m": 0.5, "sign": -1}),
    "power_0_plus": CostModel("power", {"m": 0, "sign": 1}),
    "compound_1.5": CostModel("power_compound", {"p": 1.5}),
}


def admissible_pairs(model, rng, count=20, n=2):
    """Random pairs with |x - y| in a range where every family is smooth."""
    x = rng.uniform(-1, 1, size=(count, n))
    d = rng.normal(size=(count, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    if model.id == "sqrt_minus":
        r = rng.uniform(0.05, 0.7, size=(count, 1))
    else:
        r = rng.uniform(0.4, 1.5, size=(count, 1))
    return x, x + r * d


def central(fn, z, step):
    """Central-difference Jacobian of fn at z along the last axis of z."""
    out = []
    for k in range(z.shape[-1]):
        e = np.zeros(z.shape[-1])
        e[k] = step
        out.append((fn(z + e) - fn(z - e)) / (2 * step))
    return np.stack(out, axis=-1)


# --------------------------------------------------------------------------
# evaluate

def test_quadratic_value_is_dot_product():
    assert evaluate(MODELS["quadratic"], [1, 2], [3, 4]) == pytest.approx(11.0)


def test_sqrt_plus_at_coincidence_is_minus_one():
    assert evaluate(MODELS["sqrt_plus"], [0.3, -0.2], [0.3, -0.2]) == pytest.approx(-1.0)


def test_log_branch_vanishes_at_unit_distance():
    assert evaluate(MODELS["power_0_plus"], [0.0, 0.0], [0.6, 0.8]) == pytest.approx(0.0, abs=1e-15)


def test_sqrt_minus_outside_unit_distance_raises():
    with pytest.raises(DomainViolation):
        evaluate(MODELS["sqrt_minus"], [0.0, 0.0], [1.5, 0.0])


def test_valid_pairs_mask_matches_distance_rule():
    x = np.zeros((3, 2))
    y = np.array([[0.5, 0.0], [0.9, 0.0], [1.2, 0.0]])
    assert valid_pairs(MODELS["sqrt_minus"], x, y).tolist() == [True, True, False]


def test_power_costs_need_separation_when_configured():
    model = CostModel("power", {"m": 0.5, "sign": 1}, sep_min=1.0)
    with pytest.raises(DomainViolation):
        evaluate(model, [0.0, 0.0], [0.5, 0.0])


# --------------------------------------------------------------------------
# derivative bundle

def test_quadratic_bundle():
    b = derivative_bundle(MODELS["quadratic"], [0.3, 0.1], [-1.0, 2.0])
    np.testing.assert_allclose(b.c_xy, np.eye(2))
    np.testing.assert_allclose(b.c_xx, 0.0)
    for t in (b.c_xxy, b.c_xyy, b.c_xxyy):
        np.testing.assert_allclose(t, 0.0)


def test_sqrt_plus_mixed_hessian_is_identity_at_coincidence():
    b = derivative_bundle(MODELS["sqrt_plus"], [0.4, -0.3], [0.4, -0.3])
    np.testing.assert_allclose(b.c_xy, np.eye(2), atol=1e-14)


def test_log_cost_is_singular_at_coincidence():
    with pytest.raises(SingularMixedHessian):
        derivative_bundle(MODELS["power_0_plus"], [0.2, 0.2], [0.2, 0.2])


@pytest.mark.parametrize("name", sorted(MODELS))
def test_first_and_mixed_derivatives_match_finite_differences_of_values(name, rng):
    model = MODELS[name]
    x, y = admissible_pairs(model, rng)
    b = derivative_bundle(model, x, y, order=2)
    h = 1e-5
    np.testing.assert_allclose(b.c_x, central(lambda z: evaluate(model, z, y), x, h), atol=1e-7 * (1 + np.abs(b.c_x).max()))
    np.testing.assert_allclose(b.c_y, central(lambda z: evaluate(model, x, z), y, h), atol=1e-7 * (1 + np.abs(b.c_y).max()))
    cxy = central(lambda z: derivative_bundle(model, x, z, order=1).c_x, y, 1e-5)
    np.testing.assert_allclose(b.c_xy, cxy, atol=1e-6 * (1 + np.abs(b.c_xy).max()))


@pytest.mark.parametrize("name", sorted(MODELS))
def test_higher_tensors_match_differences_of_lower_ones(name, rng):
    model = MODELS[name]
    x, y = admissible_pairs(model, rng)
    b = derivative_bundle(model, x, y, order=4)
    h = 1e-5
    cases = [
        (b.c_xx, lambda z: derivative_bundle(model, z, y, order=1).c_x, x),
        (b.c_xxy, lambda z: derivative_bundle(model, x, z, order=2).c_xx, y),
        (b.c_xyy, lambda z: derivative_bundle(model, x, z, order=2).c_xy, y),
        (b.c_xxyy, lambda z: derivative_bundle(model, x, z, order=3).c_xxy, y),
    ]
    for exact, fn, z in cases:
        np.testing.assert_allclose(exact, central(fn, z, h), atol=1e-6 * (1 + np.abs(exact).max()))


@pytest.mark.parametrize("name", sorted(MODELS))
def test_bundle_symmetries_and_inverse(name, rng):
    model = MODELS[name]
    x, y = admissible_pairs(model, rng)
    b = derivative_bundle(model, x, y, order=4)
    eye = np.broadcast_to(np.eye(2), b.c_xy.shape)
    np.testing.assert_allclose(b.c_xy @ b.c_xy_inv, eye, atol=1e-10)
    np.testing.assert_allclose(b.c_xx, np.swapaxes(b.c_xx, -1, -2), atol=1e-12)
    np.testing.assert_allclose(b.c_xxy, np.swapaxes(b.c_xxy, 1, 2), atol=1e-10 * (1 + np.abs(b.c_xxy).max()))
    np.testing.assert_allclose(b.c_xyy, np.swapaxes(b.c_xyy, 2, 3), atol=1e-10 * (1 + np.abs(b.c_xyy).max()))
    np.testing.assert_allclose(b.c_xxyy, np.swapaxes(b.c_xxyy, 3, 4), atol=1e-10 * (1 + np.abs(b.c_xxyy).max()))


def test_finite_difference_mode_tracks_analytic_mode(rng):
    model = MODELS["compound_1.5"]
    x, y = admissible_pairs(model, rng, n=3)
    a = derivative_bundle(model, x, y)
    f = derivative_bundle(model.with_mode("finite_difference"), x, y)
    np.testing.assert_allclose(f.c_xxyy, a.c_xxyy, atol=1e-6 * np.abs(a.c_xxyy).max())


def test_reflected_cost_swaps_slots(rng):
    model = MODELS["power_3_plus"]
    x, y = admissible_pairs(model, rng)
    b = derivative_bundle(model, x, y)
    r = derivative_bundle(model.reflect(), y, x)
    np.testing.assert_allclose(r.c, b.c)
    np.testing.assert_allclose(r.c_xy, np.swapaxes(b.c_xy, -1, -2))
    np.testing.assert_allclose(r.c_xxy, np.moveaxis(b.c_xyy, 0 + 1, -1), atol=1e-12)


# --------------------------------------------------------------------------
# inverse maps

def test_quadratic_inverses_are_identity_maps():
    p = np.array([0.4, -1.3])
    np.testing.assert_allclose(solve_Y(MODELS["quadratic"], [5.0, 5.0], p), p)
    np.testing.assert_allclose(solve_X(MODELS["quadratic"], p, [5.0, 5.0]), p)


def test_sqrt_plus_zero_gradient_maps_to_same_point():
    x = np.array([0.2, 0.7])
    np.testing.assert_allclose(solve_Y(MODELS["sqrt_plus"], x, [0.0, 0.0]), x)
    np.testing.assert_allclose(solve_X(MODELS["sqrt_plus"], [0.0, 0.0], x), x)


def test_sqrt_minus_inverse_uses_the_defining_relation():
    y = solve_Y(MODELS["sqrt_minus"], [0.0, 0.0], [1.0, 0.0])
    np.testing.assert_allclose(y, [-1 / np.sqrt(2), 0.0], atol=1e-14)
    b = derivative_bundle(MODELS["sqrt_minus"], [0.0, 0.0], y, order=1)
    np.testing.assert_allclose(b.c_x, [1.0, 0.0], atol=1e-12)


def test_sqrt_plus_gradient_outside_unit_ball_has_no_preimage():
    with pytest.raises(NoSolution):
        solve_X(MODELS["sqrt_plus"], [1.2, 0.0], [0.0, 0.0])
    with pytest.raises(NoSolution):
        solve_Y(MODELS["sqrt_plus"], [0.0, 0.0], [0.0, 1.0])


@pytest.mark.parametrize("name", sorted(MODELS))
def test_round_trips(name, rng):
    model = MODELS[name]
    x, y = admissible_pairs(model, rng, count=50)
    b = derivative_bundle(model, x, y, order=1)
    np.testing.assert_allclose(solve_Y(model, x, b.c_x), y, atol=1e-8)
    np.testing.assert_allclose(solve_X(model, b.c_y, y), x, atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-0.9, 0.9), min_size=2, max_size=2),
       st.floats(0.05, 0.8), st.floats(0, 2 * np.pi))
def test_compound_newton_inverse_satisfies_defining_relation(x, r, theta):
    model = MODELS["compound_1.5"]
    x = np.array(x)
    y = x + r * np.array([np.cos(theta), np.sin(theta)])
    p = derivative_bundle(model, x, y, order=1).c_x
    y2 = solve_Y(model, x, p)
    np.testing.assert_allclose(derivative_bundle(model, x, y2, order=1).c_x, p, atol=1e-10)


# --------------------------------------------------------------------------
# A and B

def test_matrix_A_special_values():
    x = np.array([0.1, 0.2])
    np.testing.assert_allclose(matrix_A(MODELS["quadratic"], x, [0.3, 0.3]), 0.0)
    np.testing.assert_allclose(matrix_A(MODELS["sqrt_plus"], x, [0.0, 0.0]), -np.eye(2))
    np.testing.assert_allclose(matrix_A(MODELS["sqrt_minus"], x, [0.0, 0.0]), np.eye(2))


def _closed_form_A(name, p):
    q = np.linalg.norm(p, axis=-1)[:, None, None]
    pp = p[:, :, None] * p[:, None, :]
    eye = np.eye(p.shape[-1])
    if name == "sqrt_plus":
        return -np.sqrt(1 - q**2) * (eye - pp)
    if name == "sqrt_minus":
        return np.sqrt(1 + q**2) * (eye + pp)
    m, sign = {"power_3_plus": (3, 1), "power_-1_plus": (-1, 1), "power_0.5_minus": (0.5, -1)}[name]
    return sign * (q ** ((m - 2) / (m - 1)) * eye + (m - 2) * q ** (-m / (m - 1)) * pp)


@pytest.mark.parametrize("name", ["sqrt_plus", "sqrt_minus", "power_3_plus", "power_-1_plus", "power_0.5_minus"])
def test_matrix_A_matches_closed_forms(name, rng):
    model = MODELS[name]
    x = rng.uniform(-1, 1, size=(100, 2))
    if name == "sqrt_plus":
        p = rng.uniform(-0.65, 0.65, size=(100, 2))
    elif name == "sqrt_minus":
        p = rng.uniform(-2, 2, size=(100, 2))
    else:
        _, y = admissible_pairs(model, rng, count=100)
        p = derivative_bundle(model, x, y + (x - _), order=1).c_x
    A = matrix_A(model, x, p)
    np.testing.assert_allclose(A, _closed_form_A(name, p), atol=1e-10 * (1 + np.abs(A).max()))
    assert np.array_equal(A, np.swapaxes(A, -1, -2))


def test_scalar_B():
    assert scalar_B(MODELS["quadratic"], [0.0, 0.0], [1.0, 2.0], 1.0) == pytest.approx(1.0)
    assert scalar_B(MODELS["sqrt_plus"], [0.5, 0.5], [0.0, 0.0], 2.0) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        scalar_B(MODELS["quadratic"], [0.0, 0.0], [1.0, 2.0], 0.0)


def test_unknown_model_parameters_are_rejected():
    with pytest.raises(ValueError):
        CostModel("power_compound", {"p": 2.5})
    with pytest.raises(ValueError):
        CostModel("nope")
