from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmelab.covering import barenblatt_window
from pmelab.grid import Cylinder, ScalarField, SpaceTimeGrid
from pmelab.intrinsic_geometry import (INTRINSIC, GeometryBuilder, PreconditionError, RadiusLadder, check_overlap,
                                       classify_cylinder, default_b_hat, engulfing_constants, fitted_upper_constant,
                                       intrinsic_ratio, verify_geometry_properties)


def test_engulfing_constants_closed_form():
    c = engulfing_constants(2.0, 1, default_b_hat(2.0))
    assert c["c0"] == 3.0
    assert c["c1"] == pytest.approx(839808.0)


@given(r_min=st.floats(1e-3, 0.5), ratio=st.floats(1.01, 2.0))
def test_ladder_is_geometric_and_reaches_down(r_min, ratio):
    lad = RadiusLadder(r_min, 1.0, ratio)
    radii = lad.radii
    assert radii[-1] == 1.0
    assert radii[0] <= r_min * (1 + 1e-9)
    assert np.allclose(radii[1:] / radii[:-1], ratio)
    assert lad.index(float(radii[len(radii) // 2])) == len(radii) // 2


def test_constant_field_heights_closed_form():
    m, c = 3.0, 3.0
    g = SpaceTimeGrid.uniform(1, (-2.0, 2.0), (0.0, 4.0), 128, 128)
    b = GeometryBuilder(ScalarField(g, np.full(g.shape, c)), m, 1.0, 1.0, RadiusLadder(1 / 16, 1.0))
    pts = np.array([[2.0, 0.0], [2.1, 0.3]])
    # the base height saturates the sub-intrinsic constraint on the doubled ball
    expected_S = 2 ** (-(m - 1) / (m + 1)) * c ** (-(m - 1))
    assert np.allclose(b.initial_heights(pts), expected_S, rtol=1e-9)
    assert np.allclose(b.s_tilde(pts, 0.5), 0.25 * expected_S, rtol=1e-9)


@given(theta=st.floats(0.1, 10.0), mean=st.floats(0.01, 10.0), m=st.floats(1.1, 5.0), gamma=st.floats(0.2, 5.0))
def test_intrinsic_ratio_is_scale_invariant(theta, mean, m, gamma):
    # u -> gamma u with time stretched by gamma^(1-m) leaves the ratio unchanged
    r0 = intrinsic_ratio(mean, theta, m)
    r1 = intrinsic_ratio(gamma ** (m + 1) * mean, theta * gamma ** (1 - m), m)
    assert r1 == pytest.approx(r0, rel=1e-10)


def test_classify_constant_cylinder():
    g = SpaceTimeGrid.uniform(1, (-2.0, 2.0), (0.0, 4.0), 64, 64)
    u = ScalarField(g, np.ones(g.shape))
    q = Cylinder(2.0, (0.0,), 0.5, 0.25)
    cls = classify_cylinder(u, q, 2.0, 2.0)
    assert cls.label == INTRINSIC
    assert cls.ratio == pytest.approx(1.0)


@pytest.fixture(scope="module")
def barenblatt_builder():
    m, t0, R = 2.0, 4.0, 0.5
    u, theta_o = barenblatt_window(m, 1, t0, (1.0,), R, 128)
    return GeometryBuilder(u, m, R, theta_o * R ** 2, RadiusLadder(R / 32, R), base_center=(t0, 1.0))


def test_base_condition(barenblatt_builder):
    chk = barenblatt_builder.require_base()
    assert chk["ratio"] == pytest.approx(1.0, abs=1e-9)


def test_base_condition_violation_raises():
    g = SpaceTimeGrid.uniform(1, (-2.0, 2.0), (0.0, 4.0), 64, 64)
    b = GeometryBuilder(ScalarField(g, np.full(g.shape, 5.0)), 2.0, 1.0, 1.0, RadiusLadder(1 / 8, 1.0),
                        base_center=(2.0, 0.0))
    with pytest.raises(PreconditionError):
        b.require_base()


def test_properties_on_barenblatt(barenblatt_builder):
    b = barenblatt_builder
    rng = np.random.default_rng(4)
    pts = np.column_stack([4.0 + rng.uniform(-b.S, b.S, 40), 1.0 + rng.uniform(-b.R, b.R, 40)])
    batch = b.build(pts)
    rep = verify_geometry_properties(batch)
    assert rep.passed, [r.check_id for r in rep.failures()]
    assert np.all(np.diff(batch.s, axis=1) > 0)
    assert math.isfinite(fitted_upper_constant(batch))


def test_points_outside_base_rejected(barenblatt_builder):
    with pytest.raises(Exception):
        barenblatt_builder.build(np.array([[4.0, 1.0 + 2 * barenblatt_builder.R]]))


def test_overlap_with_generous_constant(barenblatt_builder):
    b = barenblatt_builder
    rng = np.random.default_rng(5)
    pts = np.column_stack([4.0 + rng.uniform(-b.S / 2, b.S / 2, 30), 1.0 + rng.uniform(-b.R / 2, b.R / 2, 30)])
    res = check_overlap(b, pts, 2, 100, rng, c1=8.0)
    assert res.failures == 0
    assert 1.0 <= res.empirical_c1 <= 8.0
