from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import fsolve

from pmelab.grid import BACKWARD, CENTERED, Cylinder, ScalarField, SpaceTimeGrid
from pmelab.estimates import (InfeasibleExponentError, barenblatt_threshold, check_energy, check_mean_inequalities,
                              check_reverse_holder, check_sobolev_poincare, default_exponents, exponent_scan,
                              interpolation_exponents, solve_exponent_system)
from pmelab.regimes import RegimeError
from pmelab.solutions import BarenblattParams, FieldBundle, barenblatt_field


def exponent_oracle(m: float, d: float) -> np.ndarray:
    """Root of the raw constraint system by a generic nonlinear solver."""
    beta = 2.0 / (d * (m + 1.0))

    def eqs(v):
        alpha, sigma, b, q_o = v
        mix = sigma * (1 - alpha) + alpha
        return [alpha * (m + 1) + (1 - alpha) / d - 1,
                sigma * (1 - alpha) / mix - 2 / (m + 1),
                sigma / beta + (1 - sigma) * d / b - 1,
                q_o * (1 - sigma) * (1 - alpha) * (m - 1) - alpha * (m + 1)]

    ex = solve_exponent_system(m, d)
    start = np.array([ex.alpha, ex.sigma, ex.b, ex.q_o]) * 1.05
    return fsolve(eqs, start, xtol=1e-14)


@settings(max_examples=60, deadline=None)
@given(m=st.floats(1.1, 8.0), d=st.floats(1.05, 8.0))
def test_exponent_residuals_vanish(m, d):
    ex = solve_exponent_system(m, d)
    assume(abs(ex.sigma - 1) > 1e-3 and abs(1 - ex.sigma / ex.beta) > 1e-3)
    assert ex.max_residual <= 1e-12
    assert ex.gamma_min == pytest.approx((1 - ex.sigma) * d, rel=1e-12)


@pytest.mark.parametrize("m,d", [(3.0, 2.0), (5.0, 1.5), (5.0, 4.0), (3.0, 4.0)])
def test_exponents_match_numeric_oracle(m, d):
    ex = solve_exponent_system(m, d)
    ref = exponent_oracle(m, d)
    assert np.allclose([ex.alpha, ex.sigma, ex.b, ex.q_o], ref, rtol=1e-9)


@given(d=st.floats(1.05, 10.0))
def test_m2_gamma_is_never_below_one(d):
    assert solve_exponent_system(2.0, d).gamma_min == pytest.approx(1.0, abs=1e-12)
    assert not solve_exponent_system(2.0, d).gamma_feasible


def test_infeasible_sigma_raises():
    with pytest.raises(InfeasibleExponentError) as err:
        interpolation_exponents(1.5, 2.0)
    assert err.value.solution.sigma >= 1.0
    assert default_exponents(1.5).sigma_ok


def test_threshold():
    assert barenblatt_threshold(4.0) == 3.0
    assert barenblatt_threshold(2.0) == math.inf


@settings(max_examples=80, deadline=None)
@given(g=arrays(np.float64, st.integers(2, 40), elements=st.floats(0.0, 100.0)))
def test_mean_is_best_l2_constant(g):
    # for q = 2 and unit weight the mean minimizes the L2 deviation, so the worst ratio is at most 1
    rep = check_mean_inequalities(g, 2.0, constants=np.linspace(-5, 105, 23))
    assert rep.by_id("best_constant")[0].constant <= 1.0 + 1e-12
    assert rep.passed


@settings(max_examples=50, deadline=None)
@given(g=arrays(np.float64, 30, elements=st.floats(0.0, 10.0)), w=arrays(np.float64, 30, elements=st.floats(0.01, 1.0)),
       q=st.floats(1.0, 4.0))
def test_weighted_mean_inequalities(g, w, q):
    assert check_mean_inequalities(g, q, w).passed


def test_power_trick_is_exact_for_q2():
    g = np.random.default_rng(0).gamma(2.0, 1.0, 100)
    rep = check_mean_inequalities(g, 2.0)
    assert rep.by_id("power_trick_first")[0].constant == pytest.approx(1.0, rel=1e-12)
    assert rep.by_id("power_trick_second")[0].constant == pytest.approx(1.0, rel=1e-12)


G = SpaceTimeGrid.uniform(1, (-2.0, 2.0), (0.0, 2.0), 64, 64)
Q = Cylinder(1.8, (0.0,), 0.2, 0.1, BACKWARD)


def test_trivial_case_has_zero_constants():
    b = FieldBundle(ScalarField(G, np.ones(G.shape)), 2.0)
    for variant in ("oscillation", "plain"):
        rec = check_energy(b, Q, 1.0, 2.0, variant).records[0]
        assert rec.passed
        if variant == "oscillation":
            assert rec.lhs == 0.0 and rec.constant == 0.0
    assert check_sobolev_poincare(b, Q, 0.5).records[0].constant == 0.0
    assert check_reverse_holder(b, Q, "general").records[0].constant == 0.0


def test_backward_convention_required():
    b = FieldBundle(ScalarField(G, np.ones(G.shape)), 2.0)
    with pytest.raises(ValueError):
        check_energy(b, Cylinder(1.8, (0.0,), 0.2, 0.1, CENTERED))


def test_regime_guards():
    v = np.zeros(G.shape)
    v[:, 32:] = 1.0
    step = FieldBundle(ScalarField(G, v), 2.0)
    with pytest.raises(RegimeError):
        check_reverse_holder(step, Q, "nondegenerate")
    const = FieldBundle(ScalarField(G, np.ones(G.shape)), 2.0)
    with pytest.raises(RegimeError):
        check_reverse_holder(const, Q, "degenerate")


@pytest.mark.parametrize("gamma", [0.5, 2.0, 10.0])
def test_energy_constant_is_scale_invariant(gamma):
    m = 2.0
    prm = BarenblattParams(m, 1)
    g = SpaceTimeGrid.uniform(1, (-5.0, 5.0), (1.0, 5.0), 128, 128)
    x = g.mesh()[1]
    b = FieldBundle(barenblatt_field(prm, g), m, ScalarField(g, 0.1 * np.exp(-x ** 2)))
    q = Cylinder(4.5, (1.0,), 0.3, 0.2, BACKWARD)
    f = gamma ** (1 - m)
    qs = Cylinder(q.t0 * f, q.x0, q.r, q.s * f, BACKWARD)
    for variant in ("oscillation", "plain"):
        c0 = check_energy(b, q, 1.0, 2.0, variant).records[0].constant
        c1 = check_energy(b.scaled(gamma), qs, 1.0, 2.0, variant).records[0].constant
        assert c1 == pytest.approx(c0, rel=1e-6)


def test_exponent_scan_on_smooth_data_is_refinement_stable():
    m = 4.0
    prm = BarenblattParams(m, 1)
    levels = []
    for N in (64, 128):
        g = SpaceTimeGrid.uniform(1, (-1.0, 1.0), (2.0, 4.0), N, N)
        levels.append(FieldBundle(barenblatt_field(prm, g), m))
    rows = exponent_scan(levels, Cylinder(3.0, (0.0,), 0.4, 0.4), [2.0, 5.0], "parabolic")
    for row in rows:
        assert abs(row.slope - 1.0) < 0.03
        assert math.isfinite(row.ratio)
