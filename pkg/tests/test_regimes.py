from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmelab.grid import BACKWARD, Cylinder, ScalarField, SpaceTimeGrid
from pmelab.regimes import (DEGENERATE, NON_DEGENERATE, ParameterError, RegimeError, check_enlargement,
                            check_ndeg_consequences, check_positivity, check_subcylinder, classify_regime,
                            ndeg_smallness_holds, regime_sweep, sample_cylinders, slice_mean_variation,
                            write_regime_csv)
from pmelab.solutions import FieldBundle

G = SpaceTimeGrid.uniform(1, (-1.0, 1.0), (0.0, 1.0), 64, 64)
Q = Cylinder(0.75, (0.0,), 0.25, 0.25, BACKWARD)


def _step() -> ScalarField:
    v = np.zeros(G.shape)
    v[:, 32:] = 2.0
    return ScalarField(G, v)


def _smooth() -> ScalarField:
    return ScalarField(G, 1.0 + 0.01 * np.sin(3.0 * G.mesh()[1]))


def test_constant_is_non_degenerate():
    lab = classify_regime(ScalarField(G, np.ones(G.shape)), Q, 0.1, 2.0)
    assert lab.label == NON_DEGENERATE and lab.ratio == 0.0


def test_zero_is_degenerate():
    assert classify_regime(ScalarField(G, np.zeros(G.shape)), Q, 0.1, 2.0).label == DEGENERATE


def test_step_is_degenerate_and_stays_so_on_dilates():
    u = _step()
    lab = classify_regime(u, Q, 0.1, 2.0)
    assert lab.label == DEGENERATE
    # (mean |u - 1|^3 / mean u^3)^(1/3) = (1 / 4)^(1/3) for a half-and-half step of height 2
    assert lab.ratio == pytest.approx(0.25 ** (1 / 3), rel=1e-12)
    rep = check_enlargement(u, Q, 0.5, 2.0, factors=(2.0, 3.0))
    assert rep.passed and len(rep.records) == 2


@settings(max_examples=30, deadline=None)
@given(gamma=st.floats(0.1, 20.0), eps=st.floats(0.01, 0.9))
def test_label_is_scale_invariant(gamma, eps):
    u = _smooth()
    a = classify_regime(u, Q, eps, 2.0)
    b = classify_regime(ScalarField(G, gamma * u.values), Q, eps, 2.0)
    assert a.label == b.label
    assert b.ratio == pytest.approx(a.ratio, rel=1e-9)


@pytest.mark.parametrize("eps", [0.0, 1.0, -0.5])
def test_epsilon_range(eps):
    with pytest.raises(ParameterError):
        classify_regime(_smooth(), Q, eps, 2.0)


def test_subcylinder_and_positivity_on_smooth_data():
    u = _smooth()
    assert check_subcylinder(u, Q, 8, 0.5, 0.05, 2.0).passed
    probe = check_positivity(u, Q, K=8, m=2.0)
    assert 0.9 < probe["eta"] <= 1.0


def test_positivity_requires_non_degenerate():
    with pytest.raises(RegimeError):
        check_positivity(_step(), Q, K=8, m=2.0)


def test_ndeg_consequences():
    rep = check_ndeg_consequences(FieldBundle(_smooth(), 2.0), Q, 0.5, 0.5, 0.2)
    assert rep.passed
    with pytest.raises(RegimeError):
        check_ndeg_consequences(FieldBundle(_step(), 2.0), Q, 0.5, 0.5, 0.2)


def test_ndeg_smallness_formula():
    assert ndeg_smallness_holds(0.5, 0.1, 0.1)
    assert not ndeg_smallness_holds(0.5, 0.5, 0.2)


def test_slice_mean_variation_linear_in_time():
    t = G.mesh()[0]
    b = FieldBundle(ScalarField(G, 1.0 + t), 2.0, ScalarField(G, np.ones(G.shape)))
    rep = slice_mean_variation(b, Cylinder(0.75, (0.0,), 0.25, 0.5, BACKWARD))
    assert rep.passed
    for r in rep.records:
        assert r.constant <= 1.0


def test_sampling_is_deterministic_and_inside(tmp_path):
    def run(path):
        cyls = sample_cylinders(G, 30, np.random.default_rng(9), (0.02, 0.1), (0.5, 2.0), margin=2.0)
        for q in cyls:
            lo, hi = q.scaled(2.0).time_interval()
            assert G.t_lo <= lo and hi <= G.t_hi
            assert G.x_lo[0] <= q.x0[0] - 2 * q.r and q.x0[0] + 2 * q.r <= G.x_hi[0]
        write_regime_csv(path, regime_sweep(_step(), cyls, 0.1, m=2.0))
        return path.read_bytes()

    assert run(tmp_path / "a.csv") == run(tmp_path / "b.csv")
