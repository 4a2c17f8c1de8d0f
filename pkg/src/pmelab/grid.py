"""Space-time grids, cell-averaged fields and fast cylinder integrals.

Fields are piecewise constant on cells.  A cell is indexed ``[k, j1, ..., jn]``
with ``k`` the time index, so a field on an ``n``-dimensional spatial grid is an
``(n + 1)``-dimensional array.  Spatial balls are sup-norm balls (cubes), which
keeps every cylinder an axis-aligned box and every integral an O(1) lookup in a
prefix-sum table.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CENTERED = "centered"
BACKWARD = "backward"

_SNAPSHOT_MAGIC = "PMELAB-SNAPSHOT 1"


class DomainError(ValueError):
    """Raised when a cylinder or box leaves the grid, or a power is undefined."""


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform cell-centred grid on ``[t_lo, t_hi] x prod [x_lo_i, x_hi_i]``."""

    x_lo: tuple[float, ...]
    x_hi: tuple[float, ...]
    t_lo: float
    t_hi: float
    nx: tuple[int, ...]
    nt: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "x_lo", tuple(float(v) for v in self.x_lo))
        object.__setattr__(self, "x_hi", tuple(float(v) for v in self.x_hi))
        object.__setattr__(self, "nx", tuple(int(v) for v in self.nx))
        if not (len(self.x_lo) == len(self.x_hi) == len(self.nx) >= 1):
            raise ValueError("spatial extents and cell counts must share one dimension n >= 1")
        if self.nt < 1 or min(self.nx) < 1:
            raise ValueError("cell counts must be positive")
        if self.t_hi <= self.t_lo or any(b <= a for a, b in zip(self.x_lo, self.x_hi)):
            raise ValueError("extents must be non-empty intervals")
        steps = [(b - a) / k for a, b, k in zip(self.x_lo, self.x_hi, self.nx)]
        if max(steps) - min(steps) > 1e-12 * max(steps):
            raise ValueError(f"spatial steps differ across axes: {steps}")

    @classmethod
    def uniform(cls, n: int, x_extent: tuple[float, float], t_extent: tuple[float, float],
                nx: int, nt: int) -> SpaceTimeGrid:
        return cls((x_extent[0],) * n, (x_extent[1],) * n, t_extent[0], t_extent[1], (nx,) * n, nt)

    @property
    def n(self) -> int:
        return len(self.nx)

    @property
    def h(self) -> float:
        return (self.x_hi[0] - self.x_lo[0]) / self.nx[0]

    @property
    def ht(self) -> float:
        return (self.t_hi - self.t_lo) / self.nt

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.nt,) + self.nx

    @property
    def cell_volume(self) -> float:
        return self.ht * self.h ** self.n

    def origins(self) -> tuple[float, ...]:
        return (self.t_lo,) + self.x_lo

    def steps(self) -> tuple[float, ...]:
        return (self.ht,) + (self.h,) * self.n

    def t_centers(self) -> np.ndarray:
        return self.t_lo + (np.arange(self.nt) + 0.5) * self.ht

    def x_centers(self, axis: int = 0) -> np.ndarray:
        return self.x_lo[axis] + (np.arange(self.nx[axis]) + 0.5) * self.h

    def mesh(self) -> list[np.ndarray]:
        """Cell-centre coordinates ``[t, x1, ..., xn]`` broadcast to the field shape."""
        axes = [self.t_centers()] + [self.x_centers(i) for i in range(self.n)]
        return list(np.meshgrid(*axes, indexing="ij"))

    def refined(self, factor: int = 2) -> SpaceTimeGrid:
        return SpaceTimeGrid(self.x_lo, self.x_hi, self.t_lo, self.t_hi,
                             tuple(k * factor for k in self.nx), self.nt * factor)

    def to_dict(self) -> dict:
        return {"n": self.n, "x_lo": list(self.x_lo), "x_hi": list(self.x_hi),
                "t_lo": self.t_lo, "t_hi": self.t_hi, "nx": list(self.nx), "nt": self.nt,
                "h": self.h, "ht": self.ht}

    @classmethod
    def from_dict(cls, d: dict) -> SpaceTimeGrid:
        return cls(tuple(d["x_lo"]), tuple(d["x_hi"]), d["t_lo"], d["t_hi"], tuple(d["nx"]), d["nt"])


@dataclass(frozen=True)
class ScalarField:
    grid: SpaceTimeGrid
    values: np.ndarray
    nonneg: bool = True

    def __post_init__(self) -> None:
        vals = np.array(self.values, dtype=np.float64)
        if vals.shape != self.grid.shape:
            raise ValueError(f"values shape {vals.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("field values must be finite")
        if self.nonneg and np.any(vals < 0):
            raise ValueError("field flagged nonnegative has negative values")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def with_values(self, values: np.ndarray, nonneg: bool | None = None) -> ScalarField:
        return ScalarField(self.grid, values, self.nonneg if nonneg is None else nonneg)


@dataclass(frozen=True)
class Cylinder:
    """``(t0 - s, t0 + s) x B_r(x0)`` or, backward, ``(t0 - s, t0] x B_r(x0)``."""

    t0: float
    x0: tuple[float, ...]
    r: float
    s: float
    convention: str = CENTERED

    def __post_init__(self) -> None:
        object.__setattr__(self, "x0", tuple(float(v) for v in np.atleast_1d(self.x0)))
        if self.r <= 0 or self.s <= 0:
            raise ValueError("cylinder needs r > 0 and s > 0")
        if self.convention not in (CENTERED, BACKWARD):
            raise ValueError(f"unknown convention {self.convention!r}")

    @property
    def theta(self) -> float:
        return self.s / self.r ** 2

    @property
    def n(self) -> int:
        return len(self.x0)

    def time_center_half(self) -> tuple[float, float]:
        if self.convention == CENTERED:
            return self.t0, self.s
        return self.t0 - 0.5 * self.s, 0.5 * self.s

    def time_interval(self) -> tuple[float, float]:
        c, w = self.time_center_half()
        return c - w, c + w

    @property
    def volume(self) -> float:
        return 2.0 * self.time_center_half()[1] * (2.0 * self.r) ** self.n

    def scaled(self, a: float, b: float | None = None) -> Cylinder:
        """``aQ``: radius times ``a`` and time half-length times ``b`` (default ``a``)."""
        b = a if b is None else b
        return Cylinder(self.t0, self.x0, a * self.r, b * self.s, self.convention)

    def contains_point(self, t: float, x: Sequence[float]) -> bool:
        lo, hi = self.time_interval()
        if not (lo < t < hi or (self.convention == BACKWARD and t == hi)):
            return False
        return all(abs(xi - ci) < self.r for xi, ci in zip(x, self.x0))

    def contains(self, other: Cylinder, rtol: float = 0.0) -> bool:
        """Closed containment of ``other`` in ``self`` with a relative slack."""
        a_lo, a_hi = self.time_interval()
        b_lo, b_hi = other.time_interval()
        slack_t = rtol * (a_hi - a_lo)
        if b_lo < a_lo - slack_t or b_hi > a_hi + slack_t:
            return False
        slack_x = rtol * self.r
        return all(abs(xo - xs) + other.r <= self.r + slack_x for xo, xs in zip(other.x0, self.x0))

    def intersects(self, other: Cylinder) -> bool:
        a_lo, a_hi = self.time_interval()
        b_lo, b_hi = other.time_interval()
        if min(a_hi, b_hi) <= max(a_lo, b_lo):
            return False
        return all(abs(xo - xs) < self.r + other.r for xo, xs in zip(other.x0, self.x0))


def box_arrays(cyls: Iterable[Cylinder]) -> tuple[np.ndarray, np.ndarray]:
    """Stack cylinders as ``(centers, halves)`` arrays of shape ``(k, n + 1)``."""
    cs, ws = [], []
    for q in cyls:
        tc, tw = q.time_center_half()
        cs.append((tc,) + q.x0)
        ws.append((tw,) + (q.r,) * q.n)
    return np.asarray(cs, dtype=np.float64), np.asarray(ws, dtype=np.float64)


def _axis_coefficients(center: np.ndarray, half: np.ndarray, origin: float, step: float,
                       ncells: int) -> tuple[np.ndarray, np.ndarray]:
    """Prefix-table edge indices and weights for the integral over ``[c - w, c + w]``.

    The integral of a piecewise constant function along one axis equals
    ``step * sum_j coef[:, j] * P[edge[:, j]]`` where ``P`` is the exclusive
    cumulative sum.  An interval inside a single cell is handled separately so
    that its width ``2w`` is used directly, not a difference of coordinates.
    """
    lo = (center - half - origin) / step
    hi = (center + half - origin) / step
    i_lo = np.clip(np.floor(lo).astype(np.int64), 0, ncells - 1)
    i_hi = np.clip(np.floor(hi).astype(np.int64), 0, ncells - 1)
    w_start = 1.0 - (lo - i_lo)
    w_end = hi - i_hi
    same = i_lo == i_hi
    width = 2.0 * half / step
    edges = np.stack([i_lo, i_lo + 1, np.where(same, i_lo + 1, i_hi), np.where(same, i_lo + 1, i_hi + 1)], axis=1)
    coefs = np.stack([
        np.where(same, -width, -w_start),
        np.where(same, width, w_start - 1.0),
        np.where(same, 0.0, 1.0 - w_end),
        np.where(same, 0.0, w_end),
    ], axis=1)
    return edges, coefs


def _check_inside(centers: np.ndarray, halves: np.ndarray, origins: Sequence[float],
                  steps: Sequence[float], counts: Sequence[int]) -> None:
    for ax, (o, st, k) in enumerate(zip(origins, steps, counts)):
        tol = 1e-9 * st
        lo = centers[:, ax] - halves[:, ax]
        hi = centers[:, ax] + halves[:, ax]
        if np.any(lo < o - tol) or np.any(hi > o + k * st + tol):
            bad = int(np.argmax((lo < o - tol) | (hi > o + k * st + tol)))
            raise DomainError(f"box {bad} leaves the grid along axis {ax}: "
                              f"[{lo[bad]:.6g}, {hi[bad]:.6g}] vs [{o:.6g}, {o + k * st:.6g}]")
        if np.any(halves[:, ax] < 0):
            raise DomainError("negative half-width")


def _prefix(values: np.ndarray) -> np.ndarray:
    p = np.zeros(tuple(s + 1 for s in values.shape), dtype=np.longdouble)
    acc = values.astype(np.longdouble)
    for ax in range(values.ndim):
        acc = np.cumsum(acc, axis=ax)
    p[tuple(slice(1, None) for _ in range(values.ndim))] = acc
    return p


def _tensor_sum(table: np.ndarray, edges: list[np.ndarray], coefs: list[np.ndarray]) -> np.ndarray:
    total = np.zeros(edges[0].shape[0], dtype=np.longdouble)
    for combo in itertools.product(range(4), repeat=len(edges)):
        idx = tuple(e[:, j] for e, j in zip(edges, combo))
        c = np.ones(edges[0].shape[0])
        for cf, j in zip(coefs, combo):
            c = c * cf[:, j]
        total += c * table[idx]
    return total


def pointwise_power(values: np.ndarray, q: float) -> np.ndarray:
    """``values ** q``; fractional powers require nonnegative input."""
    values = np.asarray(values, dtype=np.float64)
    if q == 1:
        return values
    if float(q).is_integer():
        return values ** int(q)
    if np.any(values < 0):
        raise DomainError(f"negative values with fractional power {q}")
    return values ** q


class PrefixSumTable:
    """Cumulative sums of ``field ** power`` with O(1) fractional box integrals."""

    def __init__(self, field: ScalarField | np.ndarray, power: float = 1.0,
                 grid: SpaceTimeGrid | None = None) -> None:
        if isinstance(field, ScalarField):
            grid, values = field.grid, field.values
        else:
            if grid is None:
                raise ValueError("a raw array needs a grid")
            values = np.asarray(field, dtype=np.float64)
        if power <= 0:
            raise DomainError("power must be positive")
        self.grid = grid
        self.power = float(power)
        self.values = pointwise_power(values, power)
        self.table = _prefix(self.values)
        self._spatial: np.ndarray | None = None

    def integrals(self, centers: np.ndarray, halves: np.ndarray) -> np.ndarray:
        """Integrals over boxes ``centers +- halves`` (arrays of shape ``(k, n + 1)``)."""
        g = self.grid
        centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        halves = np.atleast_2d(np.asarray(halves, dtype=np.float64))
        counts = g.shape
        _check_inside(centers, halves, g.origins(), g.steps(), counts)
        edges, coefs = [], []
        for ax, (o, st, k) in enumerate(zip(g.origins(), g.steps(), counts)):
            e, c = _axis_coefficients(centers[:, ax], halves[:, ax], o, st, k)
            edges.append(e)
            coefs.append(c)
        return (_tensor_sum(self.table, edges, coefs) * g.cell_volume).astype(np.float64)

    def integral(self, q: Cylinder) -> float:
        c, w = box_arrays([q])
        return float(self.integrals(c, w)[0])

    def average(self, q: Cylinder) -> float:
        return self.integral(q) / q.volume

    def averages(self, cyls: Sequence[Cylinder]) -> np.ndarray:
        c, w = box_arrays(cyls)
        vol = 2.0 * w[:, 0] * np.prod(2.0 * w[:, 1:], axis=1)
        return self.integrals(c, w) / vol

    def spatial_row_integrals(self, x_centers: np.ndarray, x_half: float | np.ndarray) -> np.ndarray:
        """``W[k, i] = int_{B(x_centers[i])} v(t_k, x) dx`` for every time cell ``k``."""
        g = self.grid
        if self._spatial is None:
            vals = self.values.astype(np.longdouble)
            p = np.zeros((g.nt,) + tuple(s + 1 for s in g.nx), dtype=np.longdouble)
            acc = vals
            for ax in range(1, vals.ndim):
                acc = np.cumsum(acc, axis=ax)
            p[(slice(None),) + tuple(slice(1, None) for _ in g.nx)] = acc
            self._spatial = p
        xc = np.atleast_2d(np.asarray(x_centers, dtype=np.float64))
        if xc.shape[1] != g.n:
            xc = xc.reshape(-1, g.n)
        xw = np.broadcast_to(np.asarray(x_half, dtype=np.float64), xc.shape[:1])
        halves = np.repeat(xw[:, None], g.n, axis=1)
        _check_inside(xc, halves, g.x_lo, (g.h,) * g.n, g.nx)
        edges, coefs = [], []
        for ax in range(g.n):
            e, c = _axis_coefficients(xc[:, ax], halves[:, ax], g.x_lo[ax], g.h, g.nx[ax])
            edges.append(e)
            coefs.append(c)
        out = np.zeros((g.nt, xc.shape[0]), dtype=np.longdouble)
        for combo in itertools.product(range(4), repeat=g.n):
            idx = tuple(e[:, j] for e, j in zip(edges, combo))
            c = np.ones(xc.shape[0])
            for cf, j in zip(coefs, combo):
                c = c * cf[:, j]
            out += c[None, :] * self._spatial[(slice(None),) + idx]
        return (out * g.h ** g.n).astype(np.float64)


def build_prefix_table(field: ScalarField, power: float = 1.0) -> PrefixSumTable:
    return PrefixSumTable(field, power)


def cylinder_average(field_or_table: ScalarField | PrefixSumTable, q: Cylinder, power: float = 1.0) -> float:
    """Mean of ``field ** power`` over the cylinder, partial cells weighted by volume."""
    if isinstance(field_or_table, PrefixSumTable):
        table = field_or_table
        if table.power != float(power):
            raise ValueError(f"table holds power {table.power}, asked for {power}")
    else:
        if power <= 0:
            raise DomainError("power must be positive")
        table = PrefixSumTable(field_or_table, power)
    return table.average(q)


def axis_overlap_weights(lo: float, hi: float, origin: float, step: float, ncells: int) -> np.ndarray:
    """Covered fraction of each cell by ``[lo, hi]`` (direct, no prefix sums)."""
    edges = origin + step * np.arange(ncells + 1)
    return np.clip(np.minimum(hi, edges[1:]) - np.maximum(lo, edges[:-1]), 0.0, None) / step


def spatial_weights(grid: SpaceTimeGrid, x0: Sequence[float], r: float) -> np.ndarray:
    """Covered fraction of each spatial cell by the ball ``B_r(x0)``."""
    out = axis_overlap_weights(x0[0] - r, x0[0] + r, grid.x_lo[0], grid.h, grid.nx[0])
    for ax in range(1, grid.n):
        out = np.multiply.outer(out, axis_overlap_weights(x0[ax] - r, x0[ax] + r, grid.x_lo[ax], grid.h, grid.nx[ax]))
    return out


def direct_weights(grid: SpaceTimeGrid, q: Cylinder) -> np.ndarray:
    """Volume-fraction weights of every cell for ``q``, by explicit overlap."""
    t_lo, t_hi = q.time_interval()
    ws = [axis_overlap_weights(t_lo, t_hi, grid.t_lo, grid.ht, grid.nt)]
    for ax in range(grid.n):
        ws.append(axis_overlap_weights(q.x0[ax] - q.r, q.x0[ax] + q.r, grid.x_lo[ax], grid.h, grid.nx[ax]))
    out = ws[0]
    for w in ws[1:]:
        out = np.multiply.outer(out, w)
    return out


def cylinder_window(grid: SpaceTimeGrid, q: Cylinder) -> tuple[tuple[slice, ...], np.ndarray]:
    """Index window of the cells meeting ``q`` and their volume-fraction weights."""
    t_lo, t_hi = q.time_interval()
    los = [t_lo] + [c - q.r for c in q.x0]
    his = [t_hi] + [c + q.r for c in q.x0]
    sl, ws = [], []
    for lo, hi, o, st, k in zip(los, his, grid.origins(), grid.steps(), grid.shape):
        if lo < o - 1e-9 * st or hi > o + k * st + 1e-9 * st:
            raise DomainError(f"cylinder leaves the grid: [{lo:.6g}, {hi:.6g}] vs [{o:.6g}, {o + k * st:.6g}]")
        w = axis_overlap_weights(lo, hi, o, st, k)
        nz = np.nonzero(w > 0)[0]
        if nz.size == 0:
            raise DomainError("cylinder covers no cell")
        a, b = int(nz[0]), int(nz[-1]) + 1
        sl.append(slice(a, b))
        ws.append(w[a:b])
    out = ws[0]
    for w in ws[1:]:
        out = np.multiply.outer(out, w)
    return tuple(sl), out


def window_mean(values: np.ndarray, q: Cylinder, grid: SpaceTimeGrid) -> float:
    """Volume-weighted mean of an arbitrary cell array over ``q``."""
    sl, w = cylinder_window(grid, q)
    return float(np.sum(values[sl] * w) / np.sum(w))


def radial_cutoff(grid: SpaceTimeGrid, x0: Sequence[float], inner: float, outer: float) -> np.ndarray:
    """Piecewise-linear cutoff at spatial cell centres: 1 inside ``inner``, 0 beyond ``outer``."""
    xs = np.meshgrid(*[grid.x_centers(i) for i in range(grid.n)], indexing="ij")
    dist = np.zeros(grid.nx)
    for ax, x in enumerate(xs):
        dist = np.maximum(dist, np.abs(x - x0[ax]))
    if outer <= inner:
        return (dist < inner).astype(np.float64)
    return np.clip((outer - dist) / (outer - inner), 0.0, 1.0)


@dataclass
class SliceStats:
    times: np.ndarray
    mean: np.ndarray
    weighted_mean: np.ndarray
    sup: np.ndarray


def slice_stats(field: ScalarField | np.ndarray, q: Cylinder, eta: np.ndarray | None = None,
                grid: SpaceTimeGrid | None = None) -> SliceStats:
    """Per time level of ``q``: ball mean, ``eta**2``-weighted mean and max."""
    if isinstance(field, ScalarField):
        grid, values = field.grid, field.values
    else:
        values = np.asarray(field, dtype=np.float64)
        if grid is None:
            raise ValueError("a raw array needs a grid")
    t_lo, t_hi = q.time_interval()
    tw = axis_overlap_weights(t_lo, t_hi, grid.t_lo, grid.ht, grid.nt)
    if np.any(t_lo < grid.t_lo - 1e-9 * grid.ht) or t_hi > grid.t_hi + 1e-9 * grid.ht:
        raise DomainError("cylinder time interval leaves the grid")
    ks = np.nonzero(tw > 0)[0]
    if ks.size == 0:
        raise DomainError("cylinder contains no time level")
    xw = spatial_weights(grid, q.x0, q.r)
    if xw.sum() <= 0:
        raise DomainError("empty slice")
    for ax in range(grid.n):
        if q.x0[ax] - q.r < grid.x_lo[ax] - 1e-9 * grid.h or q.x0[ax] + q.r > grid.x_hi[ax] + 1e-9 * grid.h:
            raise DomainError("cylinder ball leaves the grid")
    eta2 = xw if eta is None else xw * np.asarray(eta, dtype=np.float64) ** 2
    mask = xw > 0
    rows = values[ks]
    axes = tuple(range(1, rows.ndim))
    mean = np.tensordot(rows, xw, axes=(axes, tuple(range(xw.ndim)))) / xw.sum()
    wmean = np.tensordot(rows, eta2, axes=(axes, tuple(range(eta2.ndim)))) / eta2.sum()
    sup = np.where(mask[None, ...], rows, -np.inf).reshape(len(ks), -1).max(axis=1)
    return SliceStats(grid.t_centers()[ks], mean, wmean, sup)


def gradient_power_field(u: ScalarField, exponent: float) -> ScalarField:
    """``|D(u ** exponent)|**2`` by finite differences adapted to the zero set.

    Central differences where both neighbours are positive, one-sided differences
    towards the positive neighbour next to a zero cell, and zero on the zero set.
    """
    g = u.grid
    v = u.values
    if np.any(v < 0):
        raise DomainError("gradient_power_field needs u >= 0")
    w = pointwise_power(v, exponent)
    pos = v > 0
    total = np.zeros_like(w)
    for ax in range(1, v.ndim):
        wp = np.moveaxis(w, ax, 0)
        pp = np.moveaxis(pos, ax, 0)
        d = np.zeros_like(wp)
        nb_lo = np.zeros_like(pp)
        nb_hi = np.zeros_like(pp)
        nb_lo[1:] = pp[:-1]
        nb_hi[:-1] = pp[1:]
        fwd = np.zeros_like(wp)
        bwd = np.zeros_like(wp)
        fwd[:-1] = (wp[1:] - wp[:-1]) / g.h
        bwd[1:] = (wp[1:] - wp[:-1]) / g.h
        cen = np.zeros_like(wp)
        cen[1:-1] = (wp[2:] - wp[:-2]) / (2.0 * g.h)
        both = nb_lo & nb_hi
        d = np.where(both, cen, np.where(nb_lo, bwd, np.where(nb_hi, fwd, 0.0)))
        # isolated positive cell: difference towards a zero neighbour
        alone = ~nb_lo & ~nb_hi & pp
        d = np.where(alone, wp / g.h, d)
        d = np.where(pp, d, 0.0)
        total += np.moveaxis(d, 0, ax) ** 2
    return ScalarField(g, total, nonneg=True)


def free_boundary_band(u: ScalarField, cells: int = 3) -> np.ndarray:
    """Mask of cells within ``cells`` spatial cells of the zero set (per time level)."""
    from scipy.ndimage import binary_dilation

    zero = u.values <= 0
    structure = np.zeros((1,) + (2 * cells + 1,) * u.grid.n, dtype=bool)
    structure[0] = True
    return binary_dilation(zero, structure=structure)


def save_snapshot(path: str | Path, f: ScalarField, meta: dict | None = None) -> None:
    """Text header line (JSON) followed by little-endian float64 payload."""
    header = {"grid": f.grid.to_dict(), "nonneg": f.nonneg, "dtype": "<f8",
              "shape": list(f.values.shape), "meta": meta or {}}
    with open(path, "wb") as fh:
        fh.write((_SNAPSHOT_MAGIC + "\n" + json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def load_snapshot(path: str | Path) -> tuple[ScalarField, dict]:
    with open(path, "rb") as fh:
        magic = fh.readline().decode().strip()
        if magic != _SNAPSHOT_MAGIC:
            raise ValueError(f"{path}: not a field snapshot")
        header = json.loads(fh.readline().decode())
        payload = fh.read()
    vals = np.frombuffer(payload, dtype="<f8").reshape(header["shape"]).astype(np.float64)
    return ScalarField(SpaceTimeGrid.from_dict(header["grid"]), vals, header["nonneg"]), header["meta"]


def export_csv(path: str | Path, f: ScalarField, max_cells: int = 1_000_000) -> None:
    if f.values.size > max_cells:
        raise ValueError("CSV export is meant for small grids")
    mesh = f.grid.mesh()
    names = ["t"] + [f"x{i + 1}" for i in range(f.grid.n)] + ["value"]
    with open(path, "w") as fh:
        fh.write(",".join(names) + "\n")
        cols = [m.ravel() for m in mesh] + [f.values.ravel()]
        for row in zip(*cols):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def import_csv(path: str | Path, grid: SpaceTimeGrid, nonneg: bool = True) -> ScalarField:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return ScalarField(grid, data[:, -1].reshape(grid.shape), nonneg)
