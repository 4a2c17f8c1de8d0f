"""Degenerate / non-degenerate classification and the checks that depend on it."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .grid import (BACKWARD, Cylinder, DomainError, PrefixSumTable, ScalarField, cylinder_window,
                   radial_cutoff, slice_stats, spatial_weights)
from .intrinsic_geometry import INTRINSIC, classify_cylinder
from .report import CheckRecord, VerificationReport, realized_constant
from .solutions import FieldBundle

DEGENERATE = "Degenerate"
NON_DEGENERATE = "NonDegenerate"
DEFAULT_EPSILON = 0.1


class RegimeError(ValueError):
    """A check was invoked on a cylinder in the wrong regime."""


class ParameterError(ValueError):
    pass


@dataclass
class RegimeLabel:
    label: str
    epsilon: float
    ratio: float
    mean_power: float

    @property
    def degenerate(self) -> bool:
        return self.label == DEGENERATE


def _values(u: ScalarField | FieldBundle) -> ScalarField:
    return u.u if isinstance(u, FieldBundle) else u


def oscillation_ratio(u: ScalarField, q: Cylinder, power: float) -> tuple[float, float]:
    """``(mean |u - (u)_Q|^p)^(1/p) / (mean u^p)^(1/p)`` and ``mean u^p``."""
    sl, w = cylinder_window(u.grid, q)
    v = u.values[sl]
    wsum = w.sum()
    mean = float(np.sum(v * w) / wsum)
    mean_p = float(np.sum(v ** power * w) / wsum)
    osc_p = float(np.sum(np.abs(v - mean) ** power * w) / wsum)
    if mean_p <= 0:
        return math.nan, 0.0
    return (osc_p / mean_p) ** (1.0 / power), mean_p


def classify_regime(u: ScalarField | FieldBundle, q: Cylinder, epsilon: float = DEFAULT_EPSILON,
                    m: float | None = None) -> RegimeLabel:
    """Degenerate iff the oscillation ratio is ``>= epsilon``; a vanishing ``u`` counts as degenerate."""
    if not 0 < epsilon < 1:
        raise ParameterError("epsilon must lie in (0, 1)")
    if m is None:
        if not isinstance(u, FieldBundle):
            raise ValueError("m is required for a bare field")
        m = u.m
    ratio, mean_p = oscillation_ratio(_values(u), q, m + 1.0)
    if mean_p <= 0 or ratio >= epsilon:
        return RegimeLabel(DEGENERATE, epsilon, ratio, mean_p)
    return RegimeLabel(NON_DEGENERATE, epsilon, ratio, mean_p)


def enlargement_factor(q_exp: float, a: float, n: int, K: float) -> float:
    """``c(q) [a^(n+1) (2K+1) + 1]`` with the explicit ``c(q) = 3^(q-1) 2^q``."""
    return 3.0 ** (q_exp - 1.0) * 2.0 ** q_exp * (a ** (n + 1) * (2.0 * K + 1.0) + 1.0)


def check_enlargement(u: ScalarField | FieldBundle, q: Cylinder, epsilon: float = DEFAULT_EPSILON,
                      m: float | None = None, factors: Sequence[float] = (2.0, 3.0, 4.0)) -> VerificationReport:
    """Persistence of the degenerate condition on the dilates ``aQ``.

    With ``K = epsilon^(-(m+1))`` the degenerate condition on ``Q`` gives
    ``mean g^q <= K mean |g - (g)|^q``; on ``aQ`` the ratio is then at least
    ``eps' = (c(q)[a^(n+1)(2K+1)+1])^(-1/q)``.
    """
    m = u.m if m is None else m
    uf = _values(u)
    rep = VerificationReport("enlargement")
    lab = classify_regime(uf, q, epsilon, m)
    if not lab.degenerate or lab.mean_power <= 0:
        rep.summary = {"vacuous": True, "ratio": lab.ratio}
        return rep
    qe = m + 1.0
    K = epsilon ** (-qe)
    n = uf.grid.n
    for a in factors:
        big = q.scaled(a)
        ratio, _ = oscillation_ratio(uf, big, qe)
        eps_prime = enlargement_factor(qe, a, n, K) ** (-1.0 / qe)
        rep.add(CheckRecord("enlargement", bool(ratio >= eps_prime), lhs=eps_prime,
                            rhs_terms={"ratio": ratio}, constant=ratio / epsilon,
                            cylinder=_cyl_str(big), detail=f"a={a}"))
    rep.summary = {"vacuous": False, "ratio": lab.ratio}
    return rep


def _cyl_str(q: Cylinder) -> str:
    return f"t0={q.t0!r};x0={list(q.x0)!r};r={q.r!r};s={q.s!r};{q.convention}"


def check_subcylinder(u: ScalarField | FieldBundle, q: Cylinder, N: int, sigma: float,
                      epsilon: float, m: float | None = None) -> VerificationReport:
    """Slab-mean comparability on ``N`` time slabs of ``Q`` with balls ``B_r1``, ``r1 in {sigma r, r}``."""
    m = u.m if m is None else m
    uf = _values(u)
    n = uf.grid.n
    A0 = (N / sigma ** n) ** (1.0 / (m + 1.0))
    if not 0 < sigma < 1 or N < 1:
        raise ParameterError("need N >= 1 and sigma in (0, 1)")
    if not 0 < epsilon < 1.0 / (A0 + 1.0):
        raise ParameterError(f"epsilon must lie in (0, {1.0 / (A0 + 1.0):.6g})")
    lab = classify_regime(uf, q, epsilon, m)
    table = PrefixSumTable(uf, m + 1.0)
    big = (table.average(q)) ** (1.0 / (m + 1.0))
    denom = 1.0 - (A0 + 1.0) * epsilon
    lo, hi = q.time_interval()
    rep = VerificationReport("subcylinder")
    for r1 in (sigma * q.r, q.r):
        for k in range(N):
            a, b = lo + k * (hi - lo) / N, lo + (k + 1) * (hi - lo) / N
            slab = Cylinder(0.5 * (a + b), q.x0, r1, 0.5 * (b - a))
            mid = table.average(slab) ** (1.0 / (m + 1.0))
            lower = big <= mid / denom * (1 + 1e-12)
            upper = mid / denom <= A0 / denom * big * (1 + 1e-12)
            rep.add(CheckRecord("subcylinder_lower", bool(lower), lhs=big, rhs_terms={"slab": mid / denom},
                                constant=realized_constant(big, mid / denom), cylinder=_cyl_str(slab),
                                detail=f"k={k};r1={r1!r}"))
            rep.add(CheckRecord("subcylinder_upper", bool(upper), lhs=mid / denom, rhs_terms={"bound": A0 / denom * big},
                                constant=realized_constant(mid / denom, A0 / denom * big), cylinder=_cyl_str(slab),
                                detail=f"k={k};r1={r1!r}"))
    rep.summary = {"label": lab.label, "ratio": lab.ratio, "precondition_ratio_ok": not lab.degenerate,
                   # a failing bound with the ratio condition satisfied would be a bug
                   "consistent": rep.passed or lab.degenerate}
    return rep


def ndeg_smallness_holds(alpha: float, gamma: float, epsilon: float) -> bool:
    """Absorption condition ``eps/((1-alpha)(1-eps)) + gamma/(1-eps) <= 1`` used for the truncated-mass bound."""
    return epsilon / ((1 - alpha) * (1 - epsilon)) + gamma / (1 - epsilon) <= 1.0


def check_ndeg_consequences(u: ScalarField | FieldBundle, q: Cylinder, alpha: float, gamma: float,
                            epsilon: float, m: float | None = None) -> VerificationReport:
    """Mean lower bound, truncated-mass bound and the measure bound of ``{u >= alpha (u)_Q}``."""
    m = u.m if m is None else m
    uf = _values(u)
    if not (0 < alpha < 1 and 0 < gamma < 1):
        raise ParameterError("alpha and gamma must lie in (0, 1)")
    lab = classify_regime(uf, q, epsilon, m)
    if lab.degenerate:
        raise RegimeError(f"cylinder is degenerate (ratio {lab.ratio:.4g} >= {epsilon})")
    sl, w = cylinder_window(uf.grid, q)
    v = uf.values[sl]
    wsum = w.sum()
    mean = float(np.sum(v * w) / wsum)
    big = lab.mean_power ** (1.0 / (m + 1.0))
    sel = v >= alpha * mean
    trunc = float(np.sum(v * sel * w) / wsum)
    frac = float(np.sum(sel * w) / wsum)
    rep = VerificationReport("ndeg_consequences")
    rep.add(CheckRecord("mean_lower", bool(mean >= (1 - epsilon) * big * (1 - 1e-12)), lhs=(1 - epsilon) * big,
                        rhs_terms={"mean": mean}, constant=realized_constant((1 - epsilon) * big, mean)))
    rhs = (1 - epsilon) / gamma * trunc
    rep.add(CheckRecord("truncated_mass", bool(mean <= rhs * (1 + 1e-12)), lhs=mean, rhs_terms={"truncated": rhs},
                        constant=realized_constant(mean, rhs)))
    bound = gamma ** ((m + 1.0) / m)
    rep.add(CheckRecord("measure", bool(frac >= bound), lhs=bound, rhs_terms={"fraction": frac},
                        constant=realized_constant(bound, frac)))
    rep.summary = {"ratio": lab.ratio, "smallness_condition": ndeg_smallness_holds(alpha, gamma, epsilon)}
    return rep


def _slab_points(u: ScalarField, lo: float, hi: float, x0: Sequence[float], r: float) -> np.ndarray:
    """Values on cells meeting ``(lo, hi] x B_r(x0)``."""
    g = u.grid
    t_edges = g.t_lo + g.ht * np.arange(g.nt + 1)
    rows = (t_edges[1:] > lo) & (t_edges[:-1] < hi)
    xw = spatial_weights(g, x0, r) > 0
    return u.values[rows][:, xw]


def check_positivity(u: ScalarField | FieldBundle, q: Cylinder, K: float = 2.0,
                     epsilon: float = DEFAULT_EPSILON, m: float | None = None) -> dict:
    """Largest ``eta`` with ``u >= eta (u)_Q`` on the upper half ``(t0 - s/2, t0] x B_r`` of ``Q``.

    ``Q`` plays the role of the doubled cylinder: its upper half in time and its
    full ball form the region where positivity propagates.
    """
    m = u.m if m is None else m
    uf = _values(u)
    lab = classify_regime(uf, q, epsilon, m)
    if lab.degenerate:
        raise RegimeError("positivity probe needs a non-degenerate cylinder")
    cls = classify_cylinder(uf, q, K, m)
    if cls.label != INTRINSIC:
        raise RegimeError(f"positivity probe needs an intrinsic cylinder (label {cls.label})")
    lo, hi = q.time_interval()
    mid = 0.5 * (lo + hi)
    sl, w = cylinder_window(uf.grid, q)
    mean = float(np.sum(uf.values[sl] * w) / w.sum())
    vals = _slab_points(uf, mid, hi, q.x0, q.r)
    eta = float(vals.min() / mean) if mean > 0 else 0.0
    return {"eta": eta, "mean": mean, "ratio": lab.ratio, "intrinsic_ratio": cls.ratio}


def expansion_probe(u: ScalarField | FieldBundle, t_s: float, x0: Sequence[float], rho: float, a: float,
                    gamma: float, b: float, m: float | None = None) -> dict:
    """Measure condition at time ``t_s`` on ``B_rho`` and the lower bound on the displaced slab.

    Returns the measured fraction of ``{u(t_s) > a}`` in ``B_rho``, whether it
    reaches ``gamma``, and the largest ``eta`` with ``u > eta a`` on
    ``(t_s + b rho^2/(2 a^(m-1)), t_s + b rho^2 / a^(m-1)] x B_{2 rho}``.
    """
    m = u.m if m is None else m
    uf = _values(u)
    g = uf.grid
    k = int(np.clip(np.floor((t_s - g.t_lo) / g.ht), 0, g.nt - 1))
    xw = spatial_weights(g, x0, rho)
    row = uf.values[k]
    frac = float(np.sum((row > a) * xw) / xw.sum())
    t1 = t_s + b * rho ** 2 / (2.0 * a ** (m - 1))
    t2 = t_s + b * rho ** 2 / a ** (m - 1)
    out = {"fraction": frac, "condition": frac >= gamma, "slab": (t1, t2), "eta_tilde": math.nan}
    if t2 > g.t_hi or any(c - 2 * rho < lo - 1e-12 or c + 2 * rho > hi + 1e-12
                          for c, lo, hi in zip(x0, g.x_lo, g.x_hi)):
        out["applicable"] = False
        return out
    vals = _slab_points(uf, t1, t2, x0, 2 * rho)
    out["applicable"] = vals.size > 0
    if vals.size:
        out["eta_tilde"] = float(vals.min() / a)
    return out


def slice_mean_variation(u: FieldBundle, q: Cylinder) -> VerificationReport:
    """Time variation of cutoff-weighted slice means against the flux and source terms.

    ``q`` is the backward cylinder ``(t0 - tau, t0] x B_rho``; the cutoff is 1 on
    ``B_rho`` and vanishes outside ``B_{2 rho}``, so the right-hand sides are
    averaged over the doubled ball that carries the flux.
    """
    m = u.m
    g = u.grid
    tau, rho = q.s, q.r
    outer = Cylinder(q.t0, q.x0, 2 * rho, q.s, q.convention)
    eta = radial_cutoff(g, q.x0, rho, 2 * rho)
    st = slice_stats(u.u, outer, eta=np.sqrt(eta))
    lo, hi = q.time_interval()
    inside = (st.times >= lo - 1e-12 * g.ht) & (st.times <= hi + 1e-12 * g.ht)
    wm = st.weighted_mean[inside]
    if wm.size == 0:
        raise DomainError("no time level inside the cylinder")
    lhs = float(wm.max() - wm.min())
    sl, w = cylinder_window(g, outer)
    wsum = w.sum()
    grad_um = float(np.sum(u.grad_um[sl] * w) / wsum)
    f_mean = float(np.sum(u.f.values[sl] * w) / wsum)
    pe = 2.0 * (m + 1.0) / (m + 3.0)
    F_p = float(np.sum(u.F[sl] ** (0.5 * pe) * w) / wsum)
    u_p = float(np.sum(u.u.values[sl] ** (m + 1.0) * w) / wsum)
    rep = VerificationReport("slice_mean_variation")
    terms = {"flux": tau / rho * grad_um, "source": tau * f_mean}
    rep.add(CheckRecord("averages_flux", True, lhs=lhs, rhs_terms=terms,
                        constant=realized_constant(lhs, sum(terms.values())), cylinder=_cyl_str(q)))
    terms2 = {"holder": tau / rho * F_p ** (1.0 / pe) * u_p ** ((m - 1.0) / (2.0 * (m + 1.0))),
              "source": tau * f_mean}
    rep.add(CheckRecord("averages_holder", True, lhs=lhs, rhs_terms=terms2,
                        constant=realized_constant(lhs, sum(terms2.values())), cylinder=_cyl_str(q)))
    for r in rep.records:
        r.passed = math.isfinite(r.constant)
    return rep


# -- sweeps -------------------------------------------------------------------

@dataclass
class RegimeRow:
    cid: int
    cylinder: Cylinder
    ratio: float
    label: str
    eta: float = math.nan


def regime_sweep(u: ScalarField | FieldBundle, cylinders: Iterable[Cylinder], epsilon: float = DEFAULT_EPSILON,
                 m: float | None = None, K: float = 2.0, probe: bool = True) -> list[RegimeRow]:
    m = u.m if m is None else m
    uf = _values(u)
    rows = []
    for i, q in enumerate(cylinders):
        lab = classify_regime(uf, q, epsilon, m)
        row = RegimeRow(i, q, lab.ratio, lab.label)
        if probe and not lab.degenerate:
            try:
                row.eta = check_positivity(uf, q, K, epsilon, m)["eta"]
            except RegimeError:
                pass
        rows.append(row)
    return rows


def write_regime_csv(path: str | Path, rows: Sequence[RegimeRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "t0", "x0", "r", "s", "theta", "ratio", "label", "eta"])
        for row in rows:
            q = row.cylinder
            w.writerow([row.cid, repr(q.t0), " ".join(repr(c) for c in q.x0), repr(q.r), repr(q.s),
                        repr(q.theta), repr(float(row.ratio)), row.label, repr(float(row.eta))])


def sample_cylinders(grid, count: int, rng: np.random.Generator, r_range: tuple[float, float],
                     theta_range: tuple[float, float], convention: str = BACKWARD,
                     x_range: Sequence[tuple[float, float]] | None = None,
                     t_range: tuple[float, float] | None = None, margin: float = 1.0) -> list[Cylinder]:
    """Random cylinders whose ``margin``-dilate lies inside the grid."""
    out: list[Cylinder] = []
    tries = 0
    while len(out) < count:
        tries += 1
        if tries > 200 * count:
            raise ValueError("could not place the requested cylinders inside the grid")
        r = math.exp(rng.uniform(math.log(r_range[0]), math.log(r_range[1])))
        th = math.exp(rng.uniform(math.log(theta_range[0]), math.log(theta_range[1])))
        s = th * r * r
        xr = x_range or [(lo, hi) for lo, hi in zip(grid.x_lo, grid.x_hi)]
        x0 = [rng.uniform(lo, hi) for lo, hi in xr]
        tr = t_range or (grid.t_lo, grid.t_hi)
        t0 = rng.uniform(*tr)
        q = Cylinder(t0, tuple(x0), r, s, convention).scaled(margin)
        lo, hi = q.time_interval()
        if lo < grid.t_lo or hi > grid.t_hi:
            continue
        if any(c - q.r < a or c + q.r > b for c, a, b in zip(q.x0, grid.x_lo, grid.x_hi)):
            continue
        out.append(Cylinder(t0, tuple(x0), r, s, convention))
    return out
