from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmelab.grid import ScalarField, SpaceTimeGrid
from pmelab.solutions import (BarenblattParams, FieldBundle, PMEProblem, StabilityError, barenblatt_field,
                              diffusion_operator, manufactured_stationary, pme_solve, residual_norm, scaled_field)


@settings(max_examples=25, deadline=None)
@given(m=st.floats(1.2, 5.0), t=st.floats(0.5, 4.0))
def test_barenblatt_mass_is_conserved(m, t):
    prm = BarenblattParams(m, 1)
    xb = prm.support_radius(t)
    x = np.linspace(-xb, xb, 200_001)
    vals = prm.value(np.full_like(x, t), x)
    mass = float(np.sum(vals) * (x[1] - x[0]))
    assert mass == pytest.approx(prm.mass(), rel=1e-3)


def test_barenblatt_support_and_scaling():
    prm = BarenblattParams(2.0, 1)
    t = 2.0
    xb = prm.support_radius(t)
    assert prm.value(np.array([t]), np.array([xb * 1.0001]))[0] == 0.0
    assert prm.value(np.array([t]), np.array([xb * 0.999]))[0] > 0.0
    # self-similarity: t^alpha u(t, t^beta y) does not depend on t
    y = np.linspace(-1.0, 1.0, 11)
    a = 1.0 ** prm.alpha * prm.value(np.full_like(y, 1.0), y)
    b = 3.0 ** prm.alpha * prm.value(np.full_like(y, 3.0), 3.0 ** prm.beta * y)
    assert np.allclose(a, b, rtol=1e-12)


def test_with_mass():
    prm = BarenblattParams.with_mass(3.0, 2, 5.0)
    assert prm.mass() == pytest.approx(5.0, rel=1e-12)


def test_diffusion_operator_conserves_mass_with_zero_flux():
    rng = np.random.default_rng(0)
    u = rng.uniform(0.0, 1.0, (30, 20))
    out = diffusion_operator(u, np.ones_like(u), 2.5, 0.1)
    assert abs(out.sum()) < 1e-10 * np.abs(out).sum()


def test_barenblatt_residual_halves_with_h():
    prm = BarenblattParams(2.0, 1)
    res = []
    for N in (64, 128):
        g = SpaceTimeGrid.uniform(1, (-5.0, 5.0), (1.0, 2.0), 10 * N, N)
        res.append(residual_norm(barenblatt_field(prm, g), PMEProblem(2.0, 1, prm.value)))
    assert 1.5 <= res[0] / res[1] <= 3.0


def test_solver_tracks_barenblatt():
    prm = BarenblattParams(2.0, 1)
    g = SpaceTimeGrid.uniform(1, (-5.0, 5.0), (1.0, 1.5), 200, 20)
    u = pme_solve(PMEProblem(2.0, 1, prm.value), g)
    exact = barenblatt_field(prm, g).values
    assert np.max(np.abs(u.values - exact)) < 0.05 * exact.max()
    mass = u.values.sum(axis=1) * g.h
    assert np.allclose(mass, mass[0], rtol=1e-10)


def test_solver_rejects_negative_datum():
    g = SpaceTimeGrid.uniform(1, (0.0, 1.0), (0.0, 1.0), 10, 4)
    with pytest.raises(ValueError):
        pme_solve(PMEProblem(2.0, 1, -np.ones(10)), g)


def test_substep_cap():
    g = SpaceTimeGrid.uniform(1, (0.0, 1.0), (0.0, 1.0), 50, 2)
    with pytest.raises(StabilityError):
        pme_solve(PMEProblem(2.0, 1, np.ones(50), max_substeps=3), g)


def test_manufactured_residual_is_second_order():
    res = []
    for N in (50, 100):
        g = SpaceTimeGrid.uniform(1, (-0.5, 0.5), (0.0, 1.0), N, 10)
        u, f = manufactured_stationary(g)
        res.append(residual_norm(u, PMEProblem(2.0, 1, u.values[0], f=f), band=1))
    assert res[1] < 1e-3
    assert res[0] / res[1] == pytest.approx(4.0, rel=1e-3)


@pytest.mark.parametrize("gamma", [0.5, 2.0, 10.0])
def test_scaled_barenblatt_is_still_a_solution(gamma):
    m = 2.0
    prm = BarenblattParams(m, 1)
    g = SpaceTimeGrid.uniform(1, (-5.0, 5.0), (1.0, 2.0), 640, 64)
    u = barenblatt_field(prm, g)
    us = scaled_field(u, gamma, m)
    scaled_exact = lambda t, x: gamma * prm.value(t / gamma ** (1 - m), x)
    r0 = residual_norm(u, PMEProblem(m, 1, prm.value))
    r1 = residual_norm(us, PMEProblem(m, 1, scaled_exact))
    # the residual scales like u / t
    assert r1 == pytest.approx(gamma ** m * r0, rel=1e-9)


def test_field_bundle_derived_fields():
    g = SpaceTimeGrid.uniform(1, (-1.0, 1.0), (0.0, 1.0), 40, 4)
    x = g.mesh()[1]
    b = FieldBundle(ScalarField(g, 1.0 + 0.5 * x), 3.0)
    # D u^2 = 2 u * 0.5 = u for a linear profile, so F = u^2
    F = b.F
    interior = F[:, 2:-2]
    expected = (1.0 + 0.5 * x[:, 2:-2]) ** 2
    assert np.allclose(interior, expected, rtol=1e-2)
    assert math.isclose(float(b.f.values.sum()), 0.0)
