from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pmelab.covering import (BoxSums, CoverContext, CoveringContradiction, add_spikes, admissible_spike_cells,
                             barenblatt_window, box_maximal, brute_box_maximal, brute_intrinsic_maximal, build_family,
                             cz_cover, half_cells, intrinsic_maximal, lambda_formula, normalize, pairwise_disjoint,
                             vitali_select)
from pmelab.grid import CENTERED, Cylinder, ScalarField, SpaceTimeGrid, gradient_power_field
from pmelab.intrinsic_geometry import PreconditionError
from pmelab.regimes import ParameterError
from pmelab.solutions import BarenblattParams


@given(length=st.floats(1e-3, 10.0), step=st.floats(1e-2, 1.0))
def test_half_cells_are_strictly_inside(length, step):
    d = int(half_cells(length, step))
    assert d >= 0
    if d > 0:
        assert d * step < length * (1 + 1e-9)
    assert (d + 1) * step >= length * (1 - 1e-9)


@settings(max_examples=40, deadline=None)
@given(a=arrays(np.float64, (5, 6, 4), elements=st.floats(-10, 10)), data=st.data())
def test_box_sums_match_slicing(a, data):
    lo = [data.draw(st.integers(0, k - 1)) for k in a.shape]
    hi = [data.draw(st.integers(l, k - 1)) for l, k in zip(lo, a.shape)]
    ref = a[tuple(slice(l, h + 1) for l, h in zip(lo, hi))].sum()
    got = float(BoxSums(a).sums(np.array([lo]), np.array([hi]))[0])
    assert got == pytest.approx(ref, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(a=arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(0, 100)))
def test_box_maximal_matches_brute_force(a):
    fast = box_maximal(a).values
    brute = brute_box_maximal(a)
    assert np.allclose(fast, brute, rtol=1e-12, atol=1e-12)
    assert np.all(fast >= a - 1e-12)  # single cells are boxes


def _cylinders(draw_list):
    return [Cylinder(t, (x,), r, s, CENTERED) for t, x, r, s in draw_list]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.01, 0.5), st.floats(0.01, 0.5)),
                min_size=1, max_size=25))
def test_vitali_selection(items):
    cyls = _cylinders(items)
    sel = vitali_select(cyls)
    chosen = [cyls[i] for i in sel]
    assert pairwise_disjoint(chosen)
    # every member meets a selected one whose size class is at least as large
    for i, q in enumerate(cyls):
        if i in sel:
            continue
        hits = [cyls[k] for k in sel if cyls[k].intersects(q)]
        assert hits and max(h.r for h in hits) > q.r / 2


def test_lambda_formula():
    lam, tau = lambda_formula(1.0, 0.5, 1.0, 1, 4.0 / 3.0)
    assert tau == pytest.approx(4.5)
    assert lam == pytest.approx(2 ** 4.5)
    with pytest.raises(ParameterError):
        lambda_formula(1.0, 0.4, 1.0, 1, 1.0)
    with pytest.raises(ParameterError):
        lambda_formula(1.0, 0.8, 0.7, 1, 1.0)


@pytest.fixture(scope="module")
def small_problem():
    m, t0 = 2.0, 4.0
    x0 = BarenblattParams(m, 1).support_radius(t0) - 0.2
    u, theta_o = barenblatt_window(m, 1, t0, (x0,), 0.5, 64)
    return normalize(u, m, 0.5, theta_o, (t0, x0))


def test_normalization(small_problem):
    P = small_problem
    assert P.base_ratio == pytest.approx(1.0, rel=1e-9)
    g = P.u_tilde.grid
    assert g.t_lo == pytest.approx(-2.0) and g.t_hi == pytest.approx(2.0)
    assert g.x_lo[0] == pytest.approx(-2.0) and g.x_hi[0] == pytest.approx(2.0)
    assert np.allclose(P.u_tilde.values, P.gamma * P.u.values)
    back = P.to_original(P.u_tilde)
    assert np.allclose(back.values, P.u.values)
    assert back.grid.t_lo == pytest.approx(P.u.grid.t_lo)


def test_normalization_rejects_large_ratio(small_problem):
    P = small_problem
    with pytest.raises(PreconditionError):
        normalize(P.u, P.m, 0.5, P.theta_o, (P.base.t0,) + P.base.x0, C=0.5)


def test_intrinsic_maximal_matches_brute_force(small_problem):
    fam = build_family(small_problem.u_tilde, 2.0)
    F = gradient_power_field(small_problem.u_tilde, 1.5).values
    F = add_spikes(F, [(32, 30)], 50.0)
    fast = intrinsic_maximal(F, fam).values
    brute = brute_intrinsic_maximal(F, fam)
    assert np.array_equal(np.isnan(fast), np.isnan(brute))
    ok = ~np.isnan(fast)
    assert np.allclose(fast[ok], brute[ok], rtol=1e-12)
    box = box_maximal(F).values
    assert np.all(fast[ok] <= box[ok] * (1 + 1e-12))


def test_cover_on_small_grid():
    m, t0 = 2.0, 4.0
    x0 = BarenblattParams(m, 1).support_radius(t0) - 0.2
    u, theta_o = barenblatt_window(m, 1, t0, (x0,), 0.5, 128)
    P = normalize(u, m, 0.5, theta_o, (t0, x0))
    fam = build_family(P.u_tilde, P.m)
    F0 = gradient_power_field(P.u_tilde, 1.5).values
    ctx0 = CoverContext(P, F0, fam)
    cells = admissible_spike_cells(ctx0, 4, np.random.default_rng(0))
    lam_f, _ = lambda_formula(P.C_f, 0.5, 1.0, 1, 4.0 / 3.0)
    F = add_spikes(F0, cells, 100 * max(lam_f, F0.max()))
    ctx = CoverContext(P, F, fam)
    fit = ctx.fitted_lambdas(1.0)
    lam_ab = max(lam_f, fit["reach"], fit["case_table"])
    with pytest.raises(ParameterError):
        cz_cover(ctx, lam_ab, lam_ab=lam_ab)
    cover = cz_cover(ctx, 1.2 * lam_ab, lam_ab=lam_ab)
    assert len(cover.entries) >= 1
    assert pairwise_disjoint([cover.entries[i].Q_star for i in cover.selected])
    assert cover.coverage >= 0.99
    assert cover.report.passed


def test_contradiction_type_is_runtime_error():
    assert issubclass(CoveringContradiction, RuntimeError)
