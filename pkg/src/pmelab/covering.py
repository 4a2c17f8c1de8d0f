"""Level sets, maximal functions and the stopping-time cover of a gradient level set.

The discrete intrinsic family consists of the cylinders ``Q(r, y)`` produced by
the geometry builder on the normalized cube ``Q_{2,2}``, with centres ``y`` on
cell centres inside ``Q_{1,1}`` and radii on the ladder.  For averaging, every
cylinder is replaced by the box of grid cells whose centres lie strictly inside
it, so that averages are exact sums over whole cells and the family maximal
function never exceeds the box maximal function.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .grid import CENTERED, Cylinder, ScalarField, SpaceTimeGrid, cylinder_window, gradient_power_field
from .intrinsic_geometry import GeometryBatch, GeometryBuilder, PreconditionError, RadiusLadder, intrinsic_ratio
from .regimes import DEFAULT_EPSILON, ParameterError, classify_regime
from .report import CheckRecord, VerificationReport, realized_constant
from .solutions import BarenblattParams

LADDER_RATIO = 2.0 ** 0.125
DEFAULT_C1 = 2.0 ** (13 / 8)  # smallest ladder power above the measured engulfing constant (~3)


class CoveringContradiction(RuntimeError):
    """A cylinder the construction keeps inside ``Q_{b,b}`` left it."""


# -- normalization -------------------------------------------------------------

@dataclass
class NormalizedProblem:
    u: ScalarField
    f: ScalarField | None
    base: Cylinder  # Q_{2 theta_o R^2, 2R} in original coordinates
    theta_o: float
    m: float
    gamma: float
    u_tilde: ScalarField
    f_tilde: ScalarField
    C_f: float
    base_ratio: float
    c_data: float = 1.0

    @property
    def R(self) -> float:
        return self.base.r / 2.0

    def to_original(self, field_tilde: ScalarField, power_of_gamma: float = 1.0) -> ScalarField:
        """Inverse map of the relabelling; values are divided by ``gamma**power_of_gamma``."""
        gt = field_tilde.grid
        R, tau = self.R, self.theta_o * self.R ** 2
        t0, x0 = self.base.t0, self.base.x0
        g = SpaceTimeGrid(tuple(x0[i] + R * gt.x_lo[i] for i in range(gt.n)),
                          tuple(x0[i] + R * gt.x_hi[i] for i in range(gt.n)),
                          t0 + tau * gt.t_lo, t0 + tau * gt.t_hi, gt.nx, gt.nt)
        return ScalarField(g, field_tilde.values / self.gamma ** power_of_gamma, field_tilde.nonneg)

    def energy_check(self) -> dict[str, float]:
        """``mean_{Q_{1,2}} |D u_tilde^((m+1)/2)|^2`` against ``C(f)``."""
        F = gradient_power_field(self.u_tilde, 0.5 * (self.m + 1.0)).values
        q = Cylinder(0.0, (0.0,) * self.u_tilde.grid.n, 2.0, 1.0, CENTERED)
        sl, w = cylinder_window(self.u_tilde.grid, q)
        lhs = float(np.sum(F[sl] * w) / np.sum(w))
        return {"energy": lhs, "C_f": self.C_f, "ratio": realized_constant(lhs, self.C_f)}


def normalize(u: ScalarField, m: float, R: float, theta_o: float, center: Sequence[float],
              f: ScalarField | None = None, C: float = 1.0, c_data: float = 1.0,
              check: bool = True) -> NormalizedProblem:
    """Relabel ``u`` on ``Q_{2 theta_o R^2, 2R}(center)`` as ``u_tilde`` on ``Q_{2,2}``.

    ``u_tilde(s, y) = gamma u(t0 + theta_o R^2 s, x0 + R y)`` with
    ``gamma = theta_o^(1/(m-1))`` and ``f_tilde = gamma^m R^2 f``.  The cylinder
    faces must coincide with cell faces of ``u``'s grid.
    """
    if m <= 1 or R <= 0 or theta_o <= 0:
        raise ValueError("need m > 1, R > 0, theta_o > 0")
    g = u.grid
    t0, x0 = float(center[0]), tuple(float(c) for c in center[1:])
    base = Cylinder(t0, x0, 2.0 * R, 2.0 * theta_o * R ** 2, CENTERED)
    sl, w = cylinder_window(g, base)
    if not np.allclose(w, 1.0, rtol=0.0, atol=1e-9):
        raise ValueError("the base cylinder must be a union of whole grid cells")
    gamma = theta_o ** (1.0 / (m - 1.0))
    tau = theta_o * R ** 2
    lo_idx = [s.start for s in sl]
    shape = tuple(s.stop - s.start for s in sl)
    t_lo = g.t_lo + lo_idx[0] * g.ht
    x_lo = tuple(g.x_lo[i] + lo_idx[i + 1] * g.h for i in range(g.n))
    gt = SpaceTimeGrid(tuple((x_lo[i] - x0[i]) / R for i in range(g.n)),
                       tuple((x_lo[i] + shape[i + 1] * g.h - x0[i]) / R for i in range(g.n)),
                       (t_lo - t0) / tau, (t_lo + shape[0] * g.ht - t0) / tau, shape[1:], shape[0])
    ut = ScalarField(gt, gamma * u.values[sl], u.nonneg)
    fv = np.zeros(shape) if f is None else gamma ** m * R ** 2 * f.values[sl]
    ft = ScalarField(gt, fv)
    mean_u = float(np.mean(u.values[sl] ** (m + 1.0)))
    ratio = intrinsic_ratio(mean_u, theta_o, m)
    if check and ratio > C * (1 + 1e-12):
        raise PreconditionError(f"base cylinder not sub-intrinsic: measured ratio {ratio:.6g} > C = {C}")
    C_f = c_data * float(np.mean(ft.values ** ((m + 1.0) / m) + ut.values ** (m + 1.0)))
    return NormalizedProblem(u, f, base, theta_o, m, gamma, ut, ft, C_f, ratio, c_data)


def barenblatt_window(m: float, n: int, t0: float, x0: Sequence[float], R: float, N: int,
                      C: float = 1.0, iterations: int = 20) -> tuple[ScalarField, float]:
    """Barenblatt data on a grid aligned with ``Q_{2 theta_o R^2, 2R}``, ``theta_o`` from the mean.

    ``theta_o`` solves ``theta_o (mean u^(m+1))^((m-1)/(m+1)) = C`` by fixed-point iteration on the
    exact profile, so the base condition holds with equality up to quadrature.
    """
    prm = BarenblattParams(m, n)
    x0 = tuple(float(v) for v in x0)
    theta = 1.0
    for _ in range(iterations):
        tau = theta * R ** 2
        g = SpaceTimeGrid(tuple(c - 2 * R for c in x0), tuple(c + 2 * R for c in x0),
                          t0 - 2 * tau, t0 + 2 * tau, (N,) * n, N)
        if g.t_lo <= 0:
            raise ValueError("window reaches t <= 0; choose a later t0 or smaller R")
        u = ScalarField(g, prm.value(*g.mesh()))
        mean = float(np.mean(u.values ** (m + 1.0)))
        new = C / mean ** ((m - 1.0) / (m + 1.0))
        if abs(new - theta) <= 1e-12 * theta:
            break
        theta = new
    return u, theta


# -- discrete intrinsic family -----------------------------------------------

def half_cells(length: float | np.ndarray, step: float) -> np.ndarray:
    """Largest ``d >= 0`` with ``d * step < length`` (cells strictly inside, 1e-12 relative slack)."""
    d = np.ceil(np.asarray(length, dtype=np.float64) / step * (1.0 - 1e-12)) - 1.0
    return np.maximum(d, 0.0).astype(np.int64)


class BoxSums:
    """Integer-box sums of a cell array via an inclusive prefix table."""

    def __init__(self, values: np.ndarray) -> None:
        c = np.asarray(values, dtype=np.longdouble)
        for ax in range(c.ndim):
            c = np.cumsum(c, axis=ax)
        self.table = np.pad(c, [(1, 0)] * c.ndim)
        self.shape = values.shape

    def sums(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """Sums over ``[lo, hi]`` (inclusive, per row of index arrays)."""
        lo = np.atleast_2d(lo)
        hi = np.atleast_2d(hi)
        d = lo.shape[1]
        out = np.zeros(len(lo), dtype=np.longdouble)
        for corner in itertools.product((0, 1), repeat=d):
            idx = tuple(np.where(c, hi[:, k] + 1, lo[:, k]) for k, c in enumerate(corner))
            sign = (-1) ** (d - sum(corner))
            out += sign * self.table[idx]
        return out

    def means(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        vol = np.prod(np.atleast_2d(hi) - np.atleast_2d(lo) + 1, axis=1)
        return np.asarray(self.sums(lo, hi), dtype=np.float64) / vol


@dataclass
class IntrinsicFamily:
    grid: SpaceTimeGrid
    batch: GeometryBatch
    centers: np.ndarray  # (P, n+1) cell indices of the centres
    kr: np.ndarray  # (L,) spatial half-widths in cells
    kt: np.ndarray  # (P, L) temporal half-widths in cells

    @property
    def radii(self) -> np.ndarray:
        return self.batch.radii

    @property
    def size(self) -> int:
        return self.kt.size

    def boxes(self, p: np.ndarray, j: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        p, j = np.atleast_1d(p), np.atleast_1d(j)
        half = np.column_stack([self.kt[p, j]] + [self.kr[j]] * self.grid.n)
        c = self.centers[p]
        return c - half, c + half

    def level_offset(self, factor: float) -> int:
        """Number of ladder steps covering the dilation ``factor`` (rounded up)."""
        ratio = self.radii[1] / self.radii[0]
        return int(math.ceil(math.log(factor) / math.log(ratio) - 1e-9))

    def cylinder(self, p: int, j: int, radius_factor: float = 1.0, time_factor: float = 1.0) -> Cylinder:
        y = self.batch.points[p]
        return Cylinder(float(y[0]), tuple(float(v) for v in y[1:]), radius_factor * float(self.radii[j]),
                        time_factor * float(self.batch.s[p, j]), CENTERED)


def family_centers(grid: SpaceTimeGrid, stride: int = 1, half: float = 1.0) -> np.ndarray:
    """Cell indices of the centres inside ``Q_{half,half}`` on a ``stride`` sub-lattice."""
    axes = [np.nonzero(np.abs(grid.t_centers()) < half)[0][::stride]]
    for ax in range(grid.n):
        axes.append(np.nonzero(np.abs(grid.x_centers(ax)) < half)[0][::stride])
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([a.ravel() for a in mesh])


def build_family(u_tilde: ScalarField, m: float, ladder: RadiusLadder | None = None, stride: int = 1,
                 b_hat: float | None = None) -> IntrinsicFamily:
    """Intrinsic cylinders on the normalized cube with ``R = S = 1`` around the origin."""
    g = u_tilde.grid
    ladder = ladder or RadiusLadder(g.h / 4.0, 1.0, LADDER_RATIO)
    builder = GeometryBuilder(u_tilde, m, 1.0, 1.0, ladder, b_hat, base_center=(0.0,) * (g.n + 1))
    centers = family_centers(g, stride)
    pts = np.column_stack([g.t_centers()[centers[:, 0]]] +
                          [g.x_centers(ax)[centers[:, ax + 1]] for ax in range(g.n)])
    batch = builder.build(pts)
    kr = half_cells(batch.radii, g.h)
    kt = half_cells(batch.s, g.ht)
    return IntrinsicFamily(g, batch, centers, kr, kt)


# -- maximal functions -------------------------------------------------------------

@dataclass
class MaximalField:
    values: np.ndarray
    family: str
    source: str = "F"

    def level_set(self, lam: float) -> np.ndarray:
        return self.values > lam


def _window_max(a: np.ndarray, axis: int, width: int) -> np.ndarray:
    """``out[i] = max(a[i : i + width])`` along ``axis`` by doubling."""
    a = np.moveaxis(a, axis, -1)
    n = a.shape[-1]
    if width > n:
        raise ValueError("window longer than the array")
    cur, span = a, 1
    while 2 * span <= width:
        cur = np.maximum(cur[..., :-span], cur[..., span:])
        span *= 2
    out = np.maximum(cur[..., : n - width + 1], cur[..., width - span: width - span + n - width + 1])
    return np.moveaxis(out, -1, axis)


def _sliding_max(a: np.ndarray, axis: int, half: int) -> np.ndarray:
    """``out[i] = max(a[i-half : i+half+1])`` (clipped) along ``axis``."""
    if half == 0:
        return a
    pad = [(0, 0)] * a.ndim
    pad[axis] = (half, half)
    return _window_max(np.pad(a, pad, constant_values=-np.inf), axis, 2 * half + 1)


def _paint_intervals(n_lines: int, n_cells: int, line: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                     vals: np.ndarray) -> np.ndarray:
    """Per line, the maximum of ``vals`` over all intervals ``[lo, hi]`` covering each cell."""
    levels = max(1, int(n_cells).bit_length())
    tables = [np.full((n_lines, n_cells), -np.inf) for _ in range(levels)]
    length = hi - lo + 1
    k = np.floor(np.log2(length)).astype(np.int64)
    k = np.where((1 << (k + 1)) <= length, k + 1, k)
    k = np.where((1 << k) > length, k - 1, k)
    for lev in np.unique(k):
        sel = k == lev
        np.maximum.at(tables[lev], (line[sel], lo[sel]), vals[sel])
        np.maximum.at(tables[lev], (line[sel], hi[sel] - (1 << lev) + 1), vals[sel])
    for lev in range(levels - 1, 0, -1):
        half = 1 << (lev - 1)
        t, below = tables[lev], tables[lev - 1]
        np.maximum(below, t, out=below)
        np.maximum(below[:, half:], t[:, : n_cells - half], out=below[:, half:])
    return tables[0]


def _paint_level(family: IntrinsicFamily, j: int, vals: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Cellwise max of ``vals`` over the level-``j`` members containing each cell."""
    g = family.grid
    sel = np.arange(len(vals)) if mask is None else np.nonzero(mask)[0]
    out_shape = g.shape
    if sel.size == 0:
        return np.full(out_shape, -np.inf)
    c = family.centers[sel]
    nx = g.nx
    col = np.ravel_multi_index(tuple(c[:, 1:].T), nx)
    kt = family.kt[sel, j]
    painted = _paint_intervals(int(np.prod(nx)), g.nt, col, c[:, 0] - kt, c[:, 0] + kt, vals[sel])
    arr = painted.T.reshape(out_shape)
    for ax in range(g.n):
        arr = _sliding_max(arr, ax + 1, int(family.kr[j]))
    return arr


def family_averages(F: np.ndarray, family: IntrinsicFamily) -> np.ndarray:
    """``(P, L)`` averages of ``F`` over the cell boxes of the family."""
    bs = BoxSums(F)
    P, L = family.kt.shape
    pp, jj = np.meshgrid(np.arange(P), np.arange(L), indexing="ij")
    lo, hi = family.boxes(pp.ravel(), jj.ravel())
    return bs.means(lo, hi).reshape(P, L)


def intrinsic_maximal(F: np.ndarray, family: IntrinsicFamily, averages: np.ndarray | None = None) -> MaximalField:
    """Sup of family averages over all members containing each cell (``nan`` where none does)."""
    avg = family_averages(F, family) if averages is None else averages
    out = np.full(family.grid.shape, -np.inf)
    for j in range(avg.shape[1]):
        np.maximum(out, _paint_level(family, j, avg[:, j]), out=out)
    out[np.isneginf(out)] = np.nan
    return MaximalField(out, "intrinsic")


def box_maximal(F: np.ndarray, lengths: Sequence[Sequence[int]] | None = None) -> MaximalField:
    """Sup of averages over all cell boxes containing each cell (optionally restricted box lengths)."""
    F = np.asarray(F, dtype=np.float64)
    shape = F.shape
    if lengths is None:
        lengths = [range(1, k + 1) for k in shape]
    bs = BoxSums(F)
    out = np.full(shape, -np.inf)
    for Ls in itertools.product(*lengths):
        starts = np.meshgrid(*[np.arange(k - L + 1) for k, L in zip(shape, Ls)], indexing="ij")
        lo = np.column_stack([s.ravel() for s in starts])
        avg = bs.means(lo, lo + np.asarray(Ls) - 1).reshape(starts[0].shape)
        for ax, L in enumerate(Ls):
            pad = [(0, 0)] * F.ndim
            pad[ax] = (L - 1, L - 1)
            avg = _window_max(np.pad(avg, pad, constant_values=-np.inf), ax, L)
        np.maximum(out, avg, out=out)
    return MaximalField(out, "boxes")


def brute_intrinsic_maximal(F: np.ndarray, family: IntrinsicFamily) -> np.ndarray:
    """Exhaustive oracle: direct mean over every member's cells, painted cell by cell."""
    out = np.full(F.shape, -np.inf)
    P, L = family.kt.shape
    for p in range(P):
        c = family.centers[p]
        for j in range(L):
            sl = (slice(c[0] - family.kt[p, j], c[0] + family.kt[p, j] + 1),) + tuple(
                slice(c[a] - family.kr[j], c[a] + family.kr[j] + 1) for a in range(1, len(c)))
            v = F[sl].mean()
            np.maximum(out[sl], v, out=out[sl])
    out[np.isneginf(out)] = np.nan
    return out


def brute_box_maximal(F: np.ndarray) -> np.ndarray:
    """Exhaustive oracle over all boxes: direct slab sums and explicit interval containment."""
    F = np.asarray(F, dtype=np.float64)
    shape = F.shape
    out = np.full(shape, -np.inf)
    last = shape[-1]
    iv = [(a, b) for a in range(last) for b in range(a, last)]
    ind = np.zeros((len(iv), last))
    for k, (a, b) in enumerate(iv):
        ind[k, a:b + 1] = 1.0
    width = ind.sum(axis=1)
    contains = ind.T > 0  # (last, intervals)
    lead = [[(a, b) for a in range(k) for b in range(a, k)] for k in shape[:-1]]
    for boxes in itertools.product(*lead):
        sl = tuple(slice(a, b + 1) for a, b in boxes)
        slab = F[sl]
        col = slab.reshape(-1, last).sum(axis=0)
        avgs = (ind @ col) / (width * (slab.size // last))
        per_cell = np.where(contains, avgs[None, :], -np.inf).max(axis=1)
        np.maximum(out[sl], per_cell, out=out[sl])
    return out


# -- threshold -----------------------------------------------------------------

def lambda_formula(C_f: float, a: float, b: float, n: int, b_hat: float) -> tuple[float, float]:
    """``(lambda, tau)`` with ``tau = (3(n+2)/2)/min(1, b_hat)`` and ``lambda = C_f / (b-a)^tau``."""
    if not 0.5 <= a < b <= 1.0:
        raise ParameterError("need 1/2 <= a < b <= 1")
    tau = 1.5 * (n + 2) / min(1.0, b_hat)
    return C_f / abs(b - a) ** tau, tau


def lambda_threshold(np_: NormalizedProblem, a: float, b: float, b_hat: float | None = None) -> float:
    """``C(f) / |b - a|^tau`` for the normalized problem."""
    bh = 4.0 / (np_.m + 1.0) if b_hat is None else b_hat
    return lambda_formula(np_.C_f, a, b, np_.u_tilde.grid.n, bh)[0]


def _inside_box(y: np.ndarray, r: np.ndarray, s: np.ndarray, b: float) -> np.ndarray:
    """``(t - s, t + s) x B_r(x)`` inside ``(-b, b) x B_b``."""
    tol = 1e-12
    return (np.abs(y[:, 0]) + s <= b + tol) & (np.max(np.abs(y[:, 1:]), axis=1) + r <= b + tol)


@dataclass
class CaseDecision:
    case: int
    rho_level: int
    regime: str
    big_level: int  # ladder level of Q_z**
    alternatives: list[tuple[float, str]] = field(default_factory=list)


class CoverContext:
    """Everything fixed per run: normalized data, ``F`` (with spikes), the family and its averages."""

    def __init__(self, np_: NormalizedProblem, F: np.ndarray, family: IntrinsicFamily, K: float = 4.0,
                 epsilon: float = DEFAULT_EPSILON, c1: float = DEFAULT_C1) -> None:
        self.np = np_
        self.F = F
        self.family = family
        self.K = K
        self.epsilon = epsilon
        self.c1 = c1
        self.m = np_.m
        self.avg = family_averages(F, family)
        self.box_sums = BoxSums(F)
        self.maximal = intrinsic_maximal(F, family, self.avg)
        tab = family.batch.builder.table
        P, L = self.avg.shape
        pts = family.batch.points
        means = np.empty((P, L))
        n = family.grid.n
        for j in range(L):
            halves = np.column_stack([family.batch.s[:, j]] + [np.full(P, family.radii[j])] * n)
            vol = 2.0 * halves[:, 0] * (2.0 * family.radii[j]) ** n
            means[:, j] = tab.integrals(pts, halves) / vol
        self.intrinsic = family.batch.theta * np.maximum(means, 0.0) ** ((self.m - 1.0) / (self.m + 1.0))
        self._regime: dict[tuple[int, int], str] = {}
        self.off_2 = family.level_offset(2.0)
        self.off_4 = family.level_offset(4.0)
        self.off_8 = family.level_offset(8.0)
        self.off_c1 = family.level_offset(c1)

    # averages over cell boxes of arbitrary centred cylinders around a centre cell
    def box_mean(self, center_cell: np.ndarray, q: Cylinder, power: float = 1.0) -> float:
        g = self.family.grid
        half = np.array([half_cells(q.s, g.ht)] + [half_cells(q.r, g.h)] * g.n)
        lo = np.maximum(center_cell - half, 0)
        hi = np.minimum(center_cell + half, np.array(g.shape) - 1)
        if power == 1.0:
            return float(self.box_sums.means(lo[None], hi[None])[0])
        sl = tuple(slice(a, b + 1) for a, b in zip(lo, hi))
        return float(np.mean(self.F[sl] ** power))

    def regime(self, p: int, j: int) -> str:
        key = (p, j)
        if key not in self._regime:
            q = self.family.cylinder(p, j)
            self._regime[key] = classify_regime(self.np.u_tilde, q, self.epsilon, self.m).label
        return self._regime[key]

    def decide(self, p: int, j: int) -> CaseDecision:
        """Case of the table for the stopping member ``(p, j)``: smallest intrinsic ``rho in [4r, 8r]``."""
        L = self.avg.shape[1]
        lo, hi = j + self.off_4, min(j + self.off_8, L - 1)
        alts = []
        first = None
        for i in range(lo, hi + 1):
            if self.intrinsic[p, i] >= 1.0 / self.K:
                alts.append((float(self.family.radii[i]), ""))
                if first is None:
                    first = i
        if first is None:
            return CaseDecision(3, j + self.off_4, "", j + self.off_4 + self.off_4 + self.off_c1, alts)
        label = self.regime(p, first)
        if label == "Degenerate":
            return CaseDecision(1, first, label, first + self.off_4 + self.off_c1, alts)
        return CaseDecision(2, first, label, first + self.off_2 + self.off_c1, alts)

    def big_inside(self, p: int, level: int, b: float) -> bool:
        fam = self.family
        if level > len(fam.radii) - 1:
            return False
        y = fam.batch.points[p:p + 1]
        return bool(_inside_box(y, fam.radii[level:level + 1], fam.batch.s[p, level:level + 1], b)[0])

    def fitted_lambdas(self, b: float, c2: float | None = None) -> dict[str, float]:
        """Largest averages over members whose ``Q(c2 r)`` resp. case-table ``Q_z**`` leave ``Q_{b,b}``."""
        fam = self.family
        c2 = 4.0 * self.c1 if c2 is None else c2
        off = fam.level_offset(c2)
        P, L = self.avg.shape
        viol = np.ones((P, L), dtype=bool)
        for j in range(L - off):
            viol[:, j] = ~_inside_box(fam.batch.points, np.full(P, fam.radii[j + off]), fam.batch.s[:, j + off], b)
        fit_c2 = float(self.avg[viol].max()) if viol.any() else 0.0
        order = np.argsort(-self.avg, axis=None, kind="stable")
        fit_case = 0.0
        for flat in order:
            p, j = divmod(int(flat), L)
            if self.avg[p, j] <= fit_c2:
                break
            dec = self.decide(p, j)
            if not self.big_inside(p, dec.big_level, b):
                fit_case = float(self.avg[p, j])
                break
        return {"c2": c2, "reach": fit_c2, "case_table": fit_case}


@dataclass
class CoverEntry:
    cells: list[tuple[int, ...]]
    member: tuple[int, int]
    r_z: float
    y_z: tuple[float, ...]
    case: int
    regime: str
    rho: float
    Q_z: Cylinder
    Q_star: Cylinder
    Q_2star: Cylinder
    avg_stop: float
    avg_z: float
    avg_2star: float
    rh_star: float
    alternatives: list[tuple[float, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        def cyl(q: Cylinder) -> dict:
            return {"t0": q.t0, "x0": list(q.x0), "r": q.r, "s": q.s}
        return {"cells": [list(map(int, c)) for c in self.cells], "center": list(self.y_z), "r_z": self.r_z,
                "case": self.case, "regime": self.regime, "rho": self.rho, "Q_z": cyl(self.Q_z),
                "Q_star": cyl(self.Q_star), "Q_2star": cyl(self.Q_2star), "avg_stop": self.avg_stop,
                "avg_z": self.avg_z, "avg_2star": self.avg_2star, "alternatives": self.alternatives}


@dataclass
class CoveringFamily:
    lam: float
    a: float
    b: float
    entries: list[CoverEntry]
    selected: list[int]
    level_mask: np.ndarray  # O_lambda cap Q_{a,a}
    cover_mask: np.ndarray  # union of selected Q**
    report: VerificationReport

    @property
    def coverage(self) -> float:
        tot = int(self.level_mask.sum())
        return 1.0 if tot == 0 else float((self.level_mask & self.cover_mask).sum() / tot)

    @property
    def case_histogram(self) -> dict[int, int]:
        h = {1: 0, 2: 0, 3: 0}
        for e in self.entries:
            h[e.case] += len(e.cells)
        return h

    def to_json(self) -> str:
        return json.dumps({"lambda": self.lam, "a": self.a, "b": self.b, "coverage": self.coverage,
                           "selected": self.selected, "cases": self.case_histogram,
                           "entries": [e.to_dict() for e in self.entries]}, indent=2, sort_keys=True)


def stopping_members(ctx: CoverContext, lam: float, region: np.ndarray) -> np.ndarray:
    """Per cell of ``region``, the member ``p * L + j`` of the largest ``(r, s)`` containing it with average ``> lam``.

    ``-1`` marks cells outside ``O_lambda``.
    """
    fam = ctx.family
    P, L = ctx.avg.shape
    out = np.full(fam.grid.shape, -1, dtype=np.int64)
    todo = region.copy()
    for j in range(L - 1, -1, -1):
        good = ctx.avg[:, j] > lam
        if not good.any():
            continue
        key = fam.kt[:, j].astype(np.float64) * P + np.arange(P)
        painted = _paint_level(fam, j, key, good)
        hit = todo & np.isfinite(painted)
        if hit.any():
            p = painted[hit].astype(np.int64) % P
            out[hit] = p * L + j
            todo &= ~hit
        if not todo.any():
            break
    return out


def stopping_cylinder(ctx: CoverContext, z_cell: Sequence[int], lam: float) -> tuple[float, tuple[float, ...]] | None:
    """``(r_z, y_z)`` for one cell, or ``None`` when the cell is not in ``O_lambda``."""
    region = np.zeros(ctx.family.grid.shape, dtype=bool)
    region[tuple(z_cell)] = True
    key = stopping_members(ctx, lam, region)[tuple(z_cell)]
    if key < 0:
        return None
    p, j = divmod(int(key), ctx.avg.shape[1])
    return float(ctx.family.radii[j]), tuple(float(v) for v in ctx.family.batch.points[p])


def region_mask(grid: SpaceTimeGrid, a: float) -> np.ndarray:
    mesh = grid.mesh()
    mask = np.abs(mesh[0]) < a
    for x in mesh[1:]:
        mask &= np.abs(x) < a
    return mask


def cylinder_mask(grid: SpaceTimeGrid, cyls: Sequence[Cylinder]) -> np.ndarray:
    """Cells whose centres lie in the union of the (open) cylinders."""
    mask = np.zeros(grid.shape, dtype=bool)
    t = grid.t_centers()
    xs = [grid.x_centers(ax) for ax in range(grid.n)]
    for q in cyls:
        lo, hi = q.time_interval()
        sl = [np.nonzero((t > lo) & (t < hi))[0]]
        for ax in range(grid.n):
            sl.append(np.nonzero(np.abs(xs[ax] - q.x0[ax]) < q.r)[0])
        if all(len(s) for s in sl):
            mask[np.ix_(*sl)] = True
    return mask


def _disjoint(q1: Cylinder, q2: Cylinder) -> bool:
    return not q1.intersects(q2)


def vitali_select(cyls: Sequence[Cylinder], sizes: Sequence[float] | None = None, R: float = 1.0) -> list[int]:
    """Greedy disjoint subfamily, size class by size class (largest class first).

    A member of size ``r`` lies in class ``k`` when ``R 2^-k < r <= R 2^(1-k)``;
    inside a class members are visited by decreasing size, then by index.
    """
    sizes = np.array([q.r for q in cyls] if sizes is None else sizes, dtype=np.float64)
    if len(cyls) == 0:
        return []
    cls = np.floor(np.log2(R / sizes) + 1e-12).astype(np.int64)
    order = np.lexsort((np.arange(len(sizes)), -sizes, cls))
    t0 = np.array([q.time_center_half()[0] for q in cyls])
    ts = np.array([q.time_center_half()[1] for q in cyls])
    x0 = np.array([q.x0 for q in cyls])
    rr = np.array([q.r for q in cyls])
    chosen: list[int] = []
    for i in order:
        if chosen:
            c = np.asarray(chosen)
            hit = (np.abs(t0[c] - t0[i]) < ts[c] + ts[i]) & np.all(np.abs(x0[c] - x0[i]) < (rr[c] + rr[i])[:, None], axis=1)
            if hit.any():
                continue
        chosen.append(int(i))
    return chosen


def pairwise_disjoint(cyls: Sequence[Cylinder]) -> bool:
    """Exact pairwise check with the open-set intersection test."""
    for i in range(len(cyls)):
        for j in range(i + 1, len(cyls)):
            if cyls[i].intersects(cyls[j]):
                return False
    return True


def cz_cover(ctx: CoverContext, lam: float, a: float = 0.5, b: float = 1.0, lam_ab: float | None = None,
             f_maximal: np.ndarray | None = None, q_exp: float | None = None) -> CoveringFamily:
    """Stopping-time cover of ``O_lambda cap Q_{a,a}`` with Vitali selection and the per-entry checks."""
    if lam_ab is not None and lam <= lam_ab:
        raise ParameterError(f"lambda = {lam:.6g} must exceed lambda_ab = {lam_ab:.6g}")
    fam = ctx.family
    g = fam.grid
    m = ctx.m
    q_exp = (m + 1.0) / (m + 3.0) if q_exp is None else q_exp
    region = region_mask(g, a) & ctx.maximal.level_set(lam)
    keys = stopping_members(ctx, lam, region)
    L = ctx.avg.shape[1]
    groups: dict[int, list[tuple[int, ...]]] = {}
    for cell in zip(*np.nonzero(keys >= 0)):
        groups.setdefault(int(keys[cell]), []).append(tuple(int(c) for c in cell))
    entries: list[CoverEntry] = []
    for key in sorted(groups):
        p, j = divmod(key, L)
        dec = ctx.decide(p, j)
        if not ctx.big_inside(p, dec.big_level, b):
            raise CoveringContradiction(f"Q_z** of member (p={p}, r={fam.radii[j]:.4g}) leaves Q_(b,b)")
        rho_lv = dec.rho_level
        if dec.case == 1:
            Qz, Qs = fam.cylinder(p, rho_lv), fam.cylinder(p, rho_lv, 2.0, 2.0)
        elif dec.case == 2:
            Qz, Qs = fam.cylinder(p, rho_lv, 0.25, 0.25), fam.cylinder(p, rho_lv, 0.5, 0.5)
        else:
            Qz, Qs = fam.cylinder(p, rho_lv), fam.cylinder(p, rho_lv, 2.0, 2.0)
        Q2 = fam.cylinder(p, dec.big_level)
        c = fam.centers[p]
        avg_z = ctx.box_mean(c, Qz)
        avg_2 = ctx.box_mean(c, Q2)
        fq = ctx.box_mean(c, Qs, q_exp) ** (1.0 / q_exp)
        mf = 0.0 if f_maximal is None else float(f_maximal[tuple(c)])
        entries.append(CoverEntry(groups[key], (p, j), float(fam.radii[j]), tuple(map(float, fam.batch.points[p])),
                                  dec.case, dec.regime, float(fam.radii[rho_lv]), Qz, Qs, Q2, float(ctx.avg[p, j]),
                                  avg_z, avg_2, realized_constant(avg_z, fq + mf), dec.alternatives))
    selected = vitali_select([e.Q_star for e in entries])
    cover = cylinder_mask(g, [entries[i].Q_2star for i in selected])
    rep = VerificationReport("cz_cover", summary={"lambda": lam, "lambda_ab": lam_ab, "entries": len(entries)})
    fam_cov = CoveringFamily(lam, a, b, entries, selected, region, cover, rep)
    if entries:
        two = max(e.avg_2star / lam for e in entries)
        rep.add(CheckRecord("upper_average", two <= 2.0 * (1 + 1e-12), lhs=two, rhs_terms={"bound": 2.0},
                            constant=two, detail="max mean_{Q**} F / lambda"))
        c_low = max(realized_constant(lam, e.avg_z) for e in entries)
        rep.add(CheckRecord("lower_average", math.isfinite(c_low), lhs=lam, constant=c_low,
                            detail="fitted c in lambda <= c mean_{Q_z} F"))
        vol = max(e.Q_2star.volume / e.Q_z.volume for e in entries)
        rep.add(CheckRecord("comparable_measures", math.isfinite(vol), lhs=vol, constant=vol))
        rh = max(e.rh_star for e in entries)
        rep.add(CheckRecord("sub_mean_bound", math.isfinite(rh), constant=rh,
                            detail="fitted c in mean_{Q_z} F <= c (mean_{Q*} F^q)^(1/q) + c M*"))
    sel_q = [entries[i].Q_star for i in selected]
    rep.add(CheckRecord("disjoint", pairwise_disjoint(sel_q), lhs=float(len(sel_q))))
    cov = fam_cov.coverage
    rep.add(CheckRecord("coverage", cov >= 0.99, lhs=cov, rhs_terms={"bound": 0.99}))
    rep.summary.update({"coverage": cov, "selected": len(selected), "cases": fam_cov.case_histogram})
    return fam_cov


def redistribution_check(ctx: CoverContext, cover: CoveringFamily, gamma_cut: float = 0.5,
                         eps_tilde: float = 0.1, f_maximal: np.ndarray | None = None,
                         q_exp: float | None = None) -> CheckRecord:
    """Fitted ``c`` in the level-set estimate ``int_{Q_aa cap O} F <= c lam^(1-q) int F^q [F > g lam] + 2 lam |bad|``."""
    g = ctx.family.grid
    m = ctx.m
    q = (m + 1.0) / (m + 3.0) if q_exp is None else q_exp
    lam = cover.lam
    vol = g.cell_volume
    lhs = float(ctx.F[cover.level_mask].sum() * vol)
    inner = region_mask(g, cover.b)
    F = ctx.F
    tail = float((F[inner & (F > gamma_cut * lam)] ** q).sum() * vol) * lam ** (1.0 - q)
    bad = 0.0 if f_maximal is None else float(((f_maximal > eps_tilde * lam) & region_mask(g, 2.0)).sum() * vol)
    excess = lhs - 2.0 * lam * bad
    c = 0.0 if excess <= 0 else realized_constant(excess, tail)
    return CheckRecord("redistribution", math.isfinite(c), lhs=lhs, rhs_terms={"tail": tail, "bad": 2 * lam * bad},
                       constant=c, detail=f"lambda={lam!r}")


def admissible_spike_cells(ctx: CoverContext, count: int, rng: np.random.Generator, a: float = 0.5,
                           b: float = 1.0, separation: int = 4) -> list[tuple[int, ...]]:
    """Cells in ``Q_{a,a}`` whose one-cell members all keep their case-table ``Q_z**`` inside ``Q_{b,b}``.

    A spike placed on such a cell can be isolated by a stopping cylinder; on
    other cells the threshold has to dominate the spike itself.
    """
    fam = ctx.family
    pts = fam.batch.points
    inside = np.all(np.abs(pts) < a, axis=1)
    cand = np.nonzero(inside)[0]
    rng.shuffle(cand)
    chosen: list[int] = []
    for p in cand:
        if len(chosen) >= count:
            break
        if chosen and np.min(np.max(np.abs(fam.centers[chosen] - fam.centers[p]), axis=1)) < separation:
            continue
        single = np.nonzero((fam.kt[p] == 0) & (fam.kr == 0))[0]
        if all(ctx.big_inside(int(p), ctx.decide(int(p), int(j)).big_level, b) for j in single):
            chosen.append(int(p))
    return [tuple(int(v) for v in fam.centers[p]) for p in chosen]


def add_spikes(F: np.ndarray, cells: Sequence[Sequence[int]], amplitude: float | Sequence[float]) -> np.ndarray:
    out = np.array(F, dtype=np.float64, copy=True)
    amps = np.broadcast_to(np.asarray(amplitude, dtype=np.float64), (len(cells),))
    for c, A in zip(cells, amps):
        out[tuple(c)] += A
    return out


def mask_field(grid: SpaceTimeGrid, mask: np.ndarray) -> ScalarField:
    """A 0/1 raster of a cell mask, for snapshot export."""
    return ScalarField(grid, mask.astype(np.float64))
