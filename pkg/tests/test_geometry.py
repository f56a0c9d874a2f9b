from __future__ import annotations

import numpy as np
import pytest

from mtwkit.cost_models import CostModel, derivative_bundle
from mtwkit.errors import BadGeometry, DomainViolation
from mtwkit.geometry import (build_domain, c_image, check_uniform_c_convexity,
                             check_uniform_cstar_convexity, disk, hull_defect, interval,
                             level_set_gap, rounded_square)

QUAD = CostModel("quadratic")
SQRT_PLUS = CostModel("sqrt_plus")


def image_polygon_turns(model, domain, y):
    """Cross products of consecutive edges of the boundary image, ordered by angle.

    The image of a disk boundary under x -> c_y(x, y) is a closed curve; it
    bounds a convex set iff all turns have the same sign.
    """
    b = domain.boundary_nodes
    order = np.argsort(np.arctan2(*(b - domain.center).T[::-1]))
    q = derivative_bundle(model, b[order], np.broadcast_to(y, b.shape), order=1).c_y
    e = np.roll(q, -1, axis=0) - q
    return e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]


def images_convex(model, omega, omega_star):
    for y in omega_star.nodes[:: max(1, len(omega_star.nodes) // 40)]:
        turns = image_polygon_turns(model, omega, y)
        if not (np.all(turns > 0) or np.all(turns < 0)):
            return False
    return True


# --------------------------------------------------------------------------
# construction

def test_disk_normals_are_radial():
    d = disk([0, 0], 1, 0.1)
    np.testing.assert_allclose(d.normals, d.boundary_nodes, atol=1e-12)


def test_interval_normals():
    d = interval(0, 1, 0.1)
    by_x = dict(zip(d.boundary_nodes[:, 0].round(12), d.normals[:, 0]))
    assert by_x == {0.0: -1.0, 1.0: 1.0}


def test_zero_radius_is_rejected():
    with pytest.raises(BadGeometry):
        disk([0, 0], 0, 0.1)


@pytest.mark.parametrize("spec", [
    {"kind": "disk", "center": [0.3, -0.2], "radius": 0.7, "h": 0.05},
    {"kind": "interval", "lo": -1, "hi": 2, "h": 0.1},
    {"kind": "ellipse", "center": [0, 0], "semi_axes": [2, 1], "h": 0.1},
    {"kind": "ball", "center": [0, 0, 0], "radius": 1, "h": 0.25},
])
def test_domain_invariants(spec):
    d = build_domain(spec)
    np.testing.assert_allclose(np.linalg.norm(d.normals, axis=1), 1.0, atol=1e-12)
    assert np.all(d.phi(d.interior_nodes) < 0)
    assert np.abs(d.phi(d.boundary_nodes)).max() <= 1e-10
    if tuple(d.defining) == (1.0, 0.0):
        np.testing.assert_allclose(np.linalg.norm(d.phi_grad(d.boundary_nodes), axis=1), 1.0, atol=1e-6)


def test_defining_function_gradient_with_unit_coefficients():
    d = disk([0, 0], 1, 0.1, defining=[1.0, 0.0])
    np.testing.assert_allclose(np.linalg.norm(d.phi_grad(d.boundary_nodes), axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(d.phi_grad(d.boundary_nodes), d.normals, atol=1e-12)


def test_quadrature_volumes():
    assert disk([0, 0], 1, 1 / 16).volume == pytest.approx(np.pi, rel=1e-12)
    assert interval(0, 2, 0.1).volume == pytest.approx(2.0, rel=1e-12)


# --------------------------------------------------------------------------
# images

def test_quadratic_image_is_the_domain():
    d = disk([0, 0], 1, 0.2)
    np.testing.assert_allclose(c_image(QUAD, d, [3.0, 1.0]), d.nodes)


def test_sqrt_plus_image_of_disk_from_far_point_is_nearly_convex():
    d = disk([0, 0], 1, 0.1)
    assert hull_defect(c_image(SQRT_PLUS, d, [4.0, 0.0]), d.h) <= 2 * d.h


def test_sqrt_minus_image_outside_validity_raises():
    with pytest.raises(DomainViolation):
        c_image(CostModel("sqrt_minus"), disk([0, 0], 1, 0.2), [0.5, 0.0])


# --------------------------------------------------------------------------
# c-convexity

def test_quadratic_disk_is_uniformly_convex_with_unit_constant():
    om, os_ = disk([0, 0], 1, 0.1), disk([2, 0], 0.5, 0.1)
    rep = check_uniform_c_convexity(QUAD, om, os_)
    assert rep.verdict == "uniformly_c_convex"
    assert rep.delta0_estimate == pytest.approx(1.0, abs=1e-8)
    rep = check_uniform_cstar_convexity(QUAD, os_, om)
    assert rep.verdict == "uniformly_cstar_convex"
    assert rep.delta0_estimate == pytest.approx(1.0, abs=1e-8)


def test_ellipse_constant_is_its_minimum_curvature():
    om = build_domain({"kind": "ellipse", "center": [0, 0], "semi_axes": [2, 1], "h": 0.1})
    rep = check_uniform_c_convexity(QUAD, om, disk([0, 0], 1, 0.25))
    assert rep.delta0_estimate == pytest.approx(1 / 4, rel=1e-3)


def test_rounded_square_is_degenerate():
    sq = build_domain({"kind": "point_cloud", "points": rounded_square().tolist(), "h": 0.1})
    assert check_uniform_c_convexity(QUAD, sq, disk([0, 0], 1, 0.25)).verdict == "c_convex_degenerate"
    assert check_uniform_cstar_convexity(QUAD, disk([0, 0], 1, 0.25), sq).verdict == "cstar_convex_degenerate"


def test_sqrt_plus_near_pair_agrees_with_turning_oracle():
    om, os_ = disk([0, 0], 1, 0.1), disk([0.5, 0], 0.5, 0.1)
    assert images_convex(SQRT_PLUS, om, os_)
    rep = check_uniform_c_convexity(SQRT_PLUS, om, os_)
    assert rep.verdict == "uniformly_c_convex" and rep.delta0_estimate > 0


def test_sqrt_plus_far_separated_disks_agree_with_turning_oracle():
    # at distance 3 the boundary image bends the wrong way for the far target points
    om, os_ = disk([0, 0], 1, 0.1), disk([3, 0], 1, 0.1)
    convex = images_convex(SQRT_PLUS, om, os_)
    rep = check_uniform_c_convexity(SQRT_PLUS, om, os_)
    assert not convex
    assert rep.verdict == "fails"


def test_dual_consistency():
    om, os_ = disk([0, 0], 1, 0.125), disk([0.5, 0.2], 0.6, 0.125)
    model = CostModel("power_compound", {"p": 1.4})
    a = check_uniform_c_convexity(model, om, os_)
    b = check_uniform_cstar_convexity(model.reflect(), os_, om)
    assert a.delta0_estimate == pytest.approx(b.delta0_estimate, abs=1e-8)


def test_hull_defect_small_for_uniformly_convex_images():
    om, os_ = disk([0, 0], 1, 0.1), disk([0.5, 0], 0.5, 0.1)
    assert check_uniform_c_convexity(SQRT_PLUS, om, os_).verdict == "uniformly_c_convex"
    for y in os_.nodes[::25]:
        assert hull_defect(c_image(SQRT_PLUS, om, y), om.h) <= 2 * om.h


def test_hull_defect_detects_a_dent():
    th = np.linspace(0, 2 * np.pi, 200, endpoint=False)
    r = 1 - 0.3 * np.exp(-((th - np.pi) ** 2) / 0.05)
    cloud = np.stack([r * np.cos(th), r * np.sin(th)], axis=-1)
    assert hull_defect(cloud, 0.05) > 0.1


@pytest.mark.parametrize("model,y0", [(QUAD, [0.3, 0.1]), (SQRT_PLUS, [0.5, 0.0])], ids=["quadratic", "sqrt_plus"])
def test_level_set_keeps_domain_on_one_side(model, y0):
    om = disk([0, 0], 1, 0.1)
    for k in range(0, len(om.boundary_nodes), 7):
        assert level_set_gap(model, om, k, y0, 0.2) < 0


def test_one_dimensional_convexity_is_vacuous():
    rep = check_uniform_c_convexity(SQRT_PLUS, interval(0, 1, 0.1), interval(2, 3, 0.1))
    assert rep.verdict == "uniformly_c_convex"
    assert rep.delta0_estimate == np.inf
