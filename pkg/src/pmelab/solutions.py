"""Test fields: Barenblatt profiles, manufactured solutions and an explicit PME solver."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .grid import ScalarField, SpaceTimeGrid

Source = Union[None, float, Callable[..., np.ndarray], ScalarField]


class StabilityError(RuntimeError):
    pass


@dataclass(frozen=True)
class BarenblattParams:
    m: float
    n: int
    b: float = 1.0

    def __post_init__(self) -> None:
        if self.m <= 1 or self.n < 1 or self.b <= 0:
            raise ValueError("Barenblatt profile needs m > 1, n >= 1, b > 0")

    @property
    def alpha(self) -> float:
        return self.n / (self.n * (self.m - 1) + 2)

    @property
    def beta(self) -> float:
        return 1.0 / (self.n * (self.m - 1) + 2)

    @property
    def kappa(self) -> float:
        return (self.m - 1) * self.beta / (2 * self.m)

    def value(self, t: np.ndarray, *xs: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if np.any(t <= 0):
            raise ValueError("Barenblatt profile is defined for t > 0 only")
        r2 = sum(np.asarray(x, dtype=np.float64) ** 2 for x in xs)
        core = np.maximum(self.b - self.kappa * r2 * t ** (-2 * self.beta), 0.0)
        return t ** (-self.alpha) * core ** (1.0 / (self.m - 1))

    def support_radius(self, t: float) -> float:
        return math.sqrt(self.b / self.kappa) * t ** self.beta

    def mass(self) -> float:
        """Total mass, constant in time: ``b^(p + n/2) kappa^(-n/2) |int (1-|y|^2)_+^p|``."""
        p = 1.0 / (self.m - 1)
        n = self.n
        unit = math.pi ** (n / 2) * math.gamma(p + 1) / math.gamma(p + 1 + n / 2)
        return self.b ** (p + n / 2) * self.kappa ** (-n / 2) * unit

    @classmethod
    def with_mass(cls, m: float, n: int, mass: float) -> BarenblattParams:
        ref = cls(m, n, 1.0).mass()
        p = 1.0 / (m - 1)
        return cls(m, n, (mass / ref) ** (1.0 / (p + n / 2)))


def barenblatt_field(params: BarenblattParams, grid: SpaceTimeGrid, t_min: float = 0.0) -> ScalarField:
    """Sample the Barenblatt profile at cell centres."""
    if grid.t_lo <= 0 or grid.t_lo < t_min:
        raise ValueError("Barenblatt sampling needs a time extent inside (0, inf)")
    mesh = grid.mesh()
    return ScalarField(grid, params.value(mesh[0], *mesh[1:]))


def manufactured_stationary(grid: SpaceTimeGrid) -> tuple[ScalarField, ScalarField]:
    """``u = 2 - |x|^2`` with ``f = -Laplacian(u^2)`` for ``m = 2`` (positive for ``|x| < 0.8``)."""
    mesh = grid.mesh()
    r2 = sum(x ** 2 for x in mesh[1:])
    n = grid.n
    u = 2.0 - r2
    # Laplacian of (2 - r^2)^2 = 4 r^2 ... ; u^2 = 4 - 4 r^2 + r^4
    lap = -8.0 * n + (4 * n + 8) * r2
    f = -lap
    if np.any(u <= 0) or np.any(f < 0):
        raise ValueError("manufactured solution needs a domain where u > 0 and f >= 0")
    return ScalarField(grid, u), ScalarField(grid, f)


def _sample(src: Source, grid: SpaceTimeGrid, t: float, default: float = 0.0) -> np.ndarray:
    if src is None:
        return np.full(grid.nx, default)
    if isinstance(src, (int, float)):
        return np.full(grid.nx, float(src))
    if isinstance(src, ScalarField):
        k = int(np.clip(np.floor((t - grid.t_lo) / grid.ht), 0, grid.nt - 1))
        return np.asarray(src.values[k])
    xs = np.meshgrid(*[grid.x_centers(i) for i in range(grid.n)], indexing="ij")
    return np.broadcast_to(np.asarray(src(t, *xs), dtype=np.float64), grid.nx).copy()


@dataclass
class PMEProblem:
    """``u_t - div(a D u^m) = f`` with ``nu <= a <= L`` and ``f >= 0``."""

    m: float
    n: int
    u0: Callable[..., np.ndarray] | np.ndarray
    a: Source = 1.0
    f: Source = None
    nu: float = 1.0
    L: float = 1.0
    boundary: str = "neumann"
    boundary_value: Callable[..., np.ndarray] | None = None
    max_substeps: int = 1_000_000
    safety: float = 0.9

    def __post_init__(self) -> None:
        if self.m <= 1:
            raise ValueError("m must exceed 1")
        if not 0 < self.nu <= self.L:
            raise ValueError("need 0 < nu <= L")
        if self.boundary not in ("neumann", "dirichlet"):
            raise ValueError("boundary must be 'neumann' or 'dirichlet'")
        if self.boundary == "dirichlet" and self.boundary_value is None:
            raise ValueError("dirichlet boundary needs boundary_value")

    def coefficient(self, grid: SpaceTimeGrid, t: float) -> np.ndarray:
        a = _sample(self.a, grid, t, 1.0)
        if np.any(a < self.nu * (1 - 1e-12)) or np.any(a > self.L * (1 + 1e-12)):
            raise ValueError("diffusion coefficient leaves [nu, L]")
        return a

    def source(self, grid: SpaceTimeGrid, t: float) -> np.ndarray:
        f = _sample(self.f, grid, t, 0.0)
        if np.any(f < 0):
            raise ValueError("right-hand side must be nonnegative")
        return f


def _harmonic(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return 2.0 * a * b / (a + b)


def diffusion_operator(u: np.ndarray, a: np.ndarray, m: float, h: float,
                       ghost: list[tuple[np.ndarray, np.ndarray]] | None = None) -> np.ndarray:
    """Flux-form ``div(a D u^m)`` with harmonic edge means of ``a``.

    ``ghost`` gives, per axis, the ``u`` values just outside the low and high
    faces (Dirichlet data); ``None`` means zero flux through the boundary.
    """
    phi = u ** m
    out = np.zeros_like(u)
    for ax in range(u.ndim):
        p = np.moveaxis(phi, ax, 0)
        c = np.moveaxis(a, ax, 0)
        flux = _harmonic(c[1:], c[:-1]) * (p[1:] - p[:-1]) / h
        div = np.zeros_like(p)
        div[:-1] += flux
        div[1:] -= flux
        if ghost is not None:
            lo, hi = ghost[ax]
            div[0] -= c[0] * (p[0] - lo ** m) / h
            div[-1] += c[-1] * (hi ** m - p[-1]) / h
        out += np.moveaxis(div, 0, ax) / h
    return out


def _ghosts(problem: PMEProblem, grid: SpaceTimeGrid, t: float) -> list[tuple[np.ndarray, np.ndarray]] | None:
    if problem.boundary == "neumann":
        return None
    out = []
    for ax in range(grid.n):
        coords = [grid.x_centers(i) for i in range(grid.n)]
        lo_c = list(coords)
        hi_c = list(coords)
        lo_c[ax] = np.array([grid.x_lo[ax] - 0.5 * grid.h])
        hi_c[ax] = np.array([grid.x_hi[ax] + 0.5 * grid.h])
        lo = problem.boundary_value(t, *np.meshgrid(*lo_c, indexing="ij"))
        hi = problem.boundary_value(t, *np.meshgrid(*hi_c, indexing="ij"))
        out.append((np.moveaxis(np.asarray(lo, dtype=np.float64), ax, 0)[0],
                    np.moveaxis(np.asarray(hi, dtype=np.float64), ax, 0)[0]))
    return out


def pme_solve(problem: PMEProblem, grid: SpaceTimeGrid) -> ScalarField:
    """Explicit flux-form solution sampled at every time-cell centre.

    The datum ``u0`` is taken at the first time centre; internal sub-steps keep
    ``dt <= safety * h^2 / (2 n max(a m u^(m-1)))``.
    """
    if grid.n != problem.n:
        raise ValueError("grid and problem dimensions differ")
    times = grid.t_centers()
    if callable(problem.u0):
        xs = np.meshgrid(*[grid.x_centers(i) for i in range(grid.n)], indexing="ij")
        u = np.asarray(problem.u0(times[0], *xs), dtype=np.float64).copy()
    else:
        u = np.asarray(problem.u0, dtype=np.float64).reshape(grid.nx).copy()
    if np.any(u < 0):
        raise ValueError("initial datum must be nonnegative")
    out = np.empty(grid.shape)
    out[0] = u
    h, n, m = grid.h, grid.n, problem.m
    used = 0
    for k in range(1, grid.nt):
        t, t_end = times[k - 1], times[k]
        while t < t_end - 1e-14 * abs(t_end):
            a = problem.coefficient(grid, t)
            speed = 2 * n * float(np.max(a * m * u ** (m - 1)))
            remaining = t_end - t
            dt = remaining if speed == 0 else min(remaining, problem.safety * h * h / speed)
            used += 1
            if used > problem.max_substeps:
                raise StabilityError(f"sub-step cap exceeded: CFL number {remaining * speed / h ** 2:.3g}")
            u = u + dt * (diffusion_operator(u, a, m, h, _ghosts(problem, grid, t)) + problem.source(grid, t))
            if np.any(u < 0):
                neg = float(u.min())
                if neg < -1e-12 * max(1.0, float(np.abs(u).max())):
                    raise StabilityError(f"negative value {neg:.3g} at CFL number {dt * speed / h ** 2:.3g}")
                u = np.maximum(u, 0.0)
            t += dt
        out[k] = u
    return ScalarField(grid, out)


def residual_field(u: ScalarField, problem: PMEProblem, band: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Strong residual ``(u^{k+1}-u^k)/ht - div(a D u^m) - f`` and its admissible mask.

    Admissible cells lie at least ``band`` cells from the zero set and from the
    spatial boundary at both time levels of the stencil.
    """
    from scipy.ndimage import binary_dilation

    g = u.grid
    v = u.values
    res = np.zeros(g.shape)
    for k in range(g.nt - 1):
        t = g.t_centers()[k]
        a = problem.coefficient(g, t)
        lap = diffusion_operator(v[k], a, problem.m, g.h)
        res[k] = (v[k + 1] - v[k]) / g.ht - lap - problem.source(g, t)
    zero = v <= 0
    # symmetric in time so both levels of the stencil are covered
    struct = np.ones((3,) + (2 * band + 1,) * g.n, dtype=bool)
    bad = binary_dilation(zero, structure=struct)
    edge = np.zeros(g.shape, dtype=bool)
    edge[-1] = True
    for ax in range(1, v.ndim):
        sl = [slice(None)] * v.ndim
        sl[ax] = slice(0, band)
        edge[tuple(sl)] = True
        sl[ax] = slice(v.shape[ax] - band, None)
        edge[tuple(sl)] = True
    return res, ~(bad | edge)


def residual_norm(u: ScalarField, problem: PMEProblem, band: int = 3) -> float:
    """Max residual over the admissible interior (see :func:`residual_field`)."""
    res, mask = residual_field(u, problem, band)
    if not mask.any():
        raise ValueError("no admissible interior cells")
    return float(np.max(np.abs(res[mask])))


def structure_bounds_hold(problem: PMEProblem, u: ScalarField, gradient_sq: np.ndarray) -> bool:
    """``nu m u^(m-1)|Du|^2 <= a m u^(m-1)|Du|^2 <= L m u^(m-1)|Du|^2`` pointwise."""
    ok = True
    for k, t in enumerate(u.grid.t_centers()):
        a = problem.coefficient(u.grid, t)
        base = problem.m * u.values[k] ** (problem.m - 1) * gradient_sq[k]
        ok &= bool(np.all(problem.nu * base <= a * base) and np.all(a * base <= problem.L * base))
    return ok


def scaled_field(u: ScalarField, gamma: float, m: float) -> ScalarField:
    """``gamma u`` on the grid with time stretched by ``gamma^(1-m)`` (f = 0 comparison map)."""
    g = u.grid
    factor = gamma ** (1 - m)
    g2 = SpaceTimeGrid(g.x_lo, g.x_hi, g.t_lo * factor, g.t_hi * factor, g.nx, g.nt)
    return ScalarField(g2, gamma * u.values, u.nonneg)


class FieldBundle:
    """A solution ``u`` with its source ``f`` and the derived fields the estimates use.

    Derived arrays are computed on first use and cached.
    """

    def __init__(self, u: ScalarField, m: float, f: ScalarField | None = None) -> None:
        self.u = u
        self.m = float(m)
        self.grid = u.grid
        self.f = f if f is not None else ScalarField(u.grid, np.zeros(u.grid.shape))
        if self.f.grid.shape != u.grid.shape:
            raise ValueError("u and f must share the grid")
        self._cache: dict[str, object] = {}

    def _get(self, key: str, make: Callable[[], object]):
        if key not in self._cache:
            self._cache[key] = make()
        return self._cache[key]

    @property
    def F(self) -> np.ndarray:
        """``|D u^((m+1)/2)|^2``."""
        from .grid import gradient_power_field
        return self._get("F", lambda: gradient_power_field(self.u, 0.5 * (self.m + 1)).values)

    @property
    def grad_um(self) -> np.ndarray:
        """``|D u^m|``."""
        from .grid import gradient_power_field
        return self._get("grad_um", lambda: np.sqrt(gradient_power_field(self.u, self.m).values))

    @property
    def energy_density(self) -> np.ndarray:
        """``u^(m-1) |Du|^2``."""
        from .grid import gradient_power_field
        return self._get("energy", lambda: self.u.values ** (self.m - 1) * gradient_power_field(self.u, 1.0).values)

    def table(self, name: str, power: float = 1.0):
        """Prefix table of ``u``, ``f`` or ``F`` raised to ``power``."""
        from .grid import PrefixSumTable

        def make():
            src = {"u": self.u.values, "f": self.f.values, "F": self.F}[name]
            return PrefixSumTable(src, power, self.grid)
        return self._get(f"table:{name}:{power!r}", make)

    def scaled(self, gamma: float) -> FieldBundle:
        """Intrinsic rescaling ``u -> gamma u``, ``t -> gamma^(1-m) t``, ``f -> gamma^m f``."""
        u2 = scaled_field(self.u, gamma, self.m)
        f2 = ScalarField(u2.grid, gamma ** self.m * self.f.values, self.f.nonneg)
        return FieldBundle(u2, self.m, f2)
