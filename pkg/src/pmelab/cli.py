"""Configuration-driven entry point.

``pmelab <command> --config run.json --seed 0 --out results --threads 2``

Commands: ``simulate``, ``geometry``, ``regimes``, ``verify``, ``cover``,
``exponent``, ``report``.  Every tunable lives in one JSON file whose sections
mirror the dataclasses below; omitted fields keep their defaults.  Exit codes:
0 pass, 1 config error, 2 verification failure, 3 internal contradiction.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .covering import (CoverContext, CoveringContradiction, add_spikes, admissible_spike_cells, barenblatt_window,
                       build_family, cz_cover, lambda_formula, normalize, redistribution_check)
from .estimates import (ReverseHolderConfig, barenblatt_threshold, check_energy, check_mean_inequalities,
                        check_reverse_holder, check_sobolev_poincare, exponent_scan, solve_exponent_system)
from .grid import (BACKWARD, CENTERED, Cylinder, DomainError, ScalarField, SpaceTimeGrid, export_csv,
                   gradient_power_field, save_snapshot)
from .intrinsic_geometry import (GeometryBuilder, GeometryTolerances, PreconditionError, RadiusLadder, check_overlap,
                                 default_b_hat, engulfing_constants, verify_geometry_properties)
from .regimes import RegimeError, regime_sweep, sample_cylinders, write_regime_csv
from .report import CheckRecord, VerificationReport, _clean
from .solutions import (BarenblattParams, FieldBundle, PMEProblem, barenblatt_field, manufactured_stationary,
                        pme_solve, residual_norm)

EXIT_OK, EXIT_CONFIG, EXIT_FAIL, EXIT_CONTRADICTION = 0, 1, 2, 3
COMMANDS = ("simulate", "geometry", "regimes", "verify", "cover", "exponent", "report")
SOURCES = ("barenblatt", "manufactured", "solve", "constant")


class ConfigError(ValueError):
    """Schema violation; the message starts with the offending field path."""


def _need(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{path}: {msg}")


# -- schema -------------------------------------------------------------------

@dataclass
class ProblemSpec:
    m: float = 2.0  # > 1
    n: int = 1  # spatial dimension, 1..3
    source: str = "barenblatt"  # one of SOURCES
    constant: float = 1.0  # value of u for the constant source (f = 0)
    forcing: float = 0.0  # f = forcing * exp(-|x|^2), barenblatt and solve sources only

    def validate(self, p: str) -> None:
        _need(self.m > 1, f"{p}.m", "must exceed 1")
        _need(1 <= self.n <= 3, f"{p}.n", "must lie in 1..3")
        _need(self.source in SOURCES, f"{p}.source", f"must be one of {', '.join(SOURCES)}")
        _need(self.constant >= 0, f"{p}.constant", "must be nonnegative")
        _need(self.forcing >= 0, f"{p}.forcing", "must be nonnegative")
        if self.source == "manufactured":
            _need(self.m == 2, f"{p}.m", "the manufactured source is defined for m = 2 only")


@dataclass
class GridSpec:
    N: int = 128  # cells per axis, time included
    x_lo: float = -6.0
    x_hi: float = 6.0
    t_lo: float = 1.0
    t_hi: float = 5.0

    def validate(self, p: str) -> None:
        _need(4 <= self.N <= 4096, f"{p}.N", "must lie in 4..4096")
        _need(self.x_lo < self.x_hi, f"{p}.x_hi", "must exceed x_lo")
        _need(self.t_lo < self.t_hi, f"{p}.t_hi", "must exceed t_lo")


@dataclass
class GeometrySpec:
    ladder_ratio: float = 2.0 ** 0.125  # ratio of consecutive ladder radii
    b_hat: float | None = None  # Hoelder exponent of the height map, default 4/(m+1)
    K: float = 4.0  # intrinsic two-sided constant
    epsilon: float = 0.1  # degenerate / non-degenerate threshold
    t0: float = 4.0  # base centre time (Barenblatt window)
    x0: float = 0.0  # base centre, first spatial coordinate
    R: float = 0.5  # base radius
    N: int = 256  # window cells per axis
    points: int = 200  # sampled base points
    pairs: int = 500  # sampled intersecting pairs for the engulfing check
    pair_fraction: float = 0.5  # pair base points lie in this fraction of the base cylinder
    r_min_fraction: float = 1.0 / 64.0  # smallest ladder radius relative to R
    sub_intrinsic_slack: float = 0.01

    def validate(self, p: str) -> None:
        _need(1 < self.ladder_ratio <= 2, f"{p}.ladder_ratio", "must lie in (1, 2]")
        if self.b_hat is not None:
            _need(0 < self.b_hat < 2, f"{p}.b_hat", "must lie in (0, 2)")
        _need(self.K >= 1, f"{p}.K", "must be at least 1")
        _need(0 < self.epsilon < 1, f"{p}.epsilon", "must lie in (0, 1)")
        _need(self.t0 > 0, f"{p}.t0", "must be positive")
        _need(self.R > 0, f"{p}.R", "must be positive")
        _need(8 <= self.N <= 2048, f"{p}.N", "must lie in 8..2048")
        _need(self.points >= 1, f"{p}.points", "must be positive")
        _need(self.pairs >= 1, f"{p}.pairs", "must be positive")
        _need(0 < self.pair_fraction <= 0.5, f"{p}.pair_fraction", "must lie in (0, 1/2]")
        _need(0 < self.r_min_fraction < 1, f"{p}.r_min_fraction", "must lie in (0, 1)")
        _need(self.sub_intrinsic_slack >= 0, f"{p}.sub_intrinsic_slack", "must be nonnegative")


@dataclass
class SweepSpec:
    cylinders: int = 100  # sampled test cylinders for regimes and verify
    r_range: list[float] = field(default_factory=lambda: [0.05, 0.3])
    theta_range: list[float] = field(default_factory=lambda: [0.5, 4.0])
    t_range: list[float] | None = None  # top times of sampled cylinders, default the whole grid
    delta: float = 0.5  # interpolation weight of the sup term
    d: float = 2.0  # interpolation parameter of the exponent system
    mean_samples: int = 50  # random samples for the mean inequalities
    mean_exponents: list[float] = field(default_factory=lambda: [1.0, 2.0, 3.0])

    def validate(self, p: str) -> None:
        _need(self.cylinders >= 1, f"{p}.cylinders", "must be positive")
        for name in ("r_range", "theta_range") + (("t_range",) if self.t_range is not None else ()):
            v = getattr(self, name)
            _need(len(v) == 2 and v[0] < v[1], f"{p}.{name}", "must be an increasing pair")
        _need(self.r_range[0] > 0 and self.theta_range[0] > 0, f"{p}.r_range", "ranges must be positive")
        _need(0 < self.delta < 1, f"{p}.delta", "must lie in (0, 1)")
        _need(self.d > 1, f"{p}.d", "must exceed 1")
        _need(self.mean_samples >= 1, f"{p}.mean_samples", "must be positive")
        _need(all(q >= 1 for q in self.mean_exponents), f"{p}.mean_exponents", "entries must be at least 1")


@dataclass
class CoverSpec:
    t0: float = 4.0
    boundary_offset: float = 0.2  # base centre sits this far inside the free boundary
    R: float = 0.5
    N: int = 256
    a: float = 0.5
    b: float = 1.0
    lambda_factors: list[float] = field(default_factory=lambda: [1.1, 1.25, 1.5, 2.0, 2.5])
    spikes: int = 12
    spike_scale: float = 100.0  # spike amplitude relative to max(lambda formula, max F)
    c1: float | None = None  # engulfing constant of the family, default 2^(13/8)

    def validate(self, p: str) -> None:
        _need(self.t0 > 0, f"{p}.t0", "must be positive")
        _need(self.R > 0, f"{p}.R", "must be positive")
        _need(16 <= self.N <= 1024, f"{p}.N", "must lie in 16..1024")
        _need(0.5 <= self.a < self.b <= 1.0, f"{p}.a", "need 1/2 <= a < b <= 1")
        _need(len(self.lambda_factors) >= 1 and all(k > 1 for k in self.lambda_factors),
              f"{p}.lambda_factors", "entries must exceed 1")
        _need(self.spikes >= 0, f"{p}.spikes", "must be nonnegative")
        _need(self.spike_scale > 1, f"{p}.spike_scale", "must exceed 1")
        if self.c1 is not None:
            _need(self.c1 > 1, f"{p}.c1", "must exceed 1")


@dataclass
class ExponentSpec:
    t0: float = 3.0
    r: float = 0.4  # radius of the scanned cylinder, centred on the free boundary
    s: float = 0.4  # half-height of the scanned cylinder
    levels: list[int] = field(default_factory=lambda: [64, 128, 256, 512])
    p_ladder: list[float] = field(default_factory=lambda: [2.0, 2.5, 3.0, 3.5, 4.0])
    variant: str = "intrinsic"
    divergence_growth: float = 1.5  # LHS growth per level marking divergence
    stability: float = 0.2  # relative LHS change per level tolerated as bounded

    def validate(self, p: str) -> None:
        _need(self.t0 > 0, f"{p}.t0", "must be positive")
        _need(self.r > 0 and self.s > 0, f"{p}.r", "radius and half-height must be positive")
        _need(len(self.levels) >= 2 and all(b > a for a, b in zip(self.levels, self.levels[1:])),
              f"{p}.levels", "need at least two increasing cell counts")
        _need(all(v >= 8 for v in self.levels), f"{p}.levels", "cell counts must be at least 8")
        _need(len(self.p_ladder) >= 1 and all(v > 1 for v in self.p_ladder), f"{p}.p_ladder", "entries must exceed 1")
        _need(self.variant in ("intrinsic", "parabolic"), f"{p}.variant", "must be intrinsic or parabolic")
        _need(self.divergence_growth > 1, f"{p}.divergence_growth", "must exceed 1")
        _need(self.stability > 0, f"{p}.stability", "must be positive")


@dataclass
class OutputSpec:
    dir: str = "pmelab-out"
    csv_max_cells: int = 100_000  # fields larger than this are written as snapshots only

    def validate(self, p: str) -> None:
        _need(bool(self.dir), f"{p}.dir", "must be non-empty")
        _need(self.csv_max_cells >= 0, f"{p}.csv_max_cells", "must be nonnegative")


@dataclass
class RunConfig:
    problem: ProblemSpec = field(default_factory=ProblemSpec)
    grid: GridSpec = field(default_factory=GridSpec)
    geometry: GeometrySpec = field(default_factory=GeometrySpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    cover: CoverSpec = field(default_factory=CoverSpec)
    exponent: ExponentSpec = field(default_factory=ExponentSpec)
    output: OutputSpec = field(default_factory=OutputSpec)
    seed: int = 0
    threads: int = 1

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if is_dataclass(v):
                v.validate(f.name)
        _need(0 <= self.seed < 2 ** 64, "seed", "must be an unsigned 64-bit integer")
        _need(1 <= self.threads <= 256, "threads", "must lie in 1..256")

    @property
    def b_hat(self) -> float:
        return default_b_hat(self.problem.m) if self.geometry.b_hat is None else self.geometry.b_hat

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(value: Any, default: Any, path: str) -> Any:
    if isinstance(value, bool):
        raise ConfigError(f"{path}: booleans are not accepted here")
    if default is None:
        if value is None:
            return None
        if isinstance(value, (int, float)):
            return float(value)
        if isinstance(value, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            return [float(v) for v in value]
        raise ConfigError(f"{path}: expected a number, a list of numbers or null")
    if isinstance(default, int):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"{path}: expected a finite number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        proto = default[0] if default else 0.0
        return [_coerce(v, proto, f"{path}[{i}]") for i, v in enumerate(value)]
    raise ConfigError(f"{path}: unsupported field")


def _load(cls: type, data: Any, path: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object")
    obj = cls()
    known = {f.name for f in fields(cls)}
    for key in sorted(data):
        p = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"{p}: unknown field")
        current = getattr(obj, key)
        if is_dataclass(current):
            setattr(obj, key, _load(type(current), data[key], p))
        else:
            setattr(obj, key, _coerce(data[key], current, p))
    return obj


def load_config(source: str | Path | dict | None = None) -> RunConfig:
    """Parse and validate a config; raises :class:`ConfigError` with a field path."""
    if source is None:
        data: Any = {}
    elif isinstance(source, dict):
        data = source
    else:
        try:
            data = json.loads(Path(source).read_text())
        except FileNotFoundError:
            raise ConfigError(f"<file>: {source} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"<file>: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    cfg = _load(RunConfig, data, "")
    cfg.validate()
    return cfg


# -- shared helpers -----------------------------------------------------------

def _grid(cfg: RunConfig, N: int | None = None) -> SpaceTimeGrid:
    g = cfg.grid
    N = N or g.N
    return SpaceTimeGrid.uniform(cfg.problem.n, (g.x_lo, g.x_hi), (g.t_lo, g.t_hi), N, N)


def _forcing(cfg: RunConfig, grid: SpaceTimeGrid) -> ScalarField:
    mesh = grid.mesh()
    r2 = sum(x ** 2 for x in mesh[1:])
    return ScalarField(grid, cfg.problem.forcing * np.exp(-r2))


def make_bundle(cfg: RunConfig, grid: SpaceTimeGrid | None = None) -> FieldBundle:
    """Solution and source on the configured grid for the configured source."""
    grid = grid or _grid(cfg)
    pr = cfg.problem
    prm = BarenblattParams(pr.m, pr.n)
    try:
        if pr.source == "barenblatt":
            return FieldBundle(barenblatt_field(prm, grid), pr.m, _forcing(cfg, grid))
        if pr.source == "manufactured":
            u, f = manufactured_stationary(grid)
            return FieldBundle(u, pr.m, f)
        if pr.source == "constant":
            return FieldBundle(ScalarField(grid, np.full(grid.shape, pr.constant)), pr.m)
        f = _forcing(cfg, grid)
        problem = PMEProblem(pr.m, pr.n, prm.value, f=None if pr.forcing == 0 else f)
        return FieldBundle(pme_solve(problem, grid), pr.m, f)
    except ValueError as exc:
        if isinstance(exc, DomainError):
            raise
        raise ConfigError(f"grid: {exc}") from None


def _parallel_map(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(_clean(data), indent=2, sort_keys=True) + "\n")


def _write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _rng(cfg: RunConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, stream])


# -- commands -----------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    bundle = make_bundle(cfg)
    g = bundle.grid
    meta = {"source": cfg.problem.source, "m": cfg.problem.m}
    save_snapshot(out / "field_u.snap", bundle.u, meta)
    save_snapshot(out / "field_f.snap", bundle.f, meta)
    if g.shape and bundle.u.values.size <= cfg.output.csv_max_cells:
        export_csv(out / "field_u.csv", bundle.u)
    summary: dict[str, Any] = {"source": cfg.problem.source, "grid": g.to_dict(),
                               "u_min": float(bundle.u.values.min()), "u_max": float(bundle.u.values.max())}
    if cfg.problem.source in ("barenblatt", "solve"):
        prm = BarenblattParams(cfg.problem.m, cfg.problem.n)
        f = None if cfg.problem.forcing == 0 else bundle.f
        problem = PMEProblem(cfg.problem.m, cfg.problem.n, prm.value, f=f)
        try:
            summary["residual"] = residual_norm(bundle.u, problem)
        except ValueError as exc:
            summary["residual"] = f"unavailable: {exc}"
        if cfg.problem.source == "solve" and cfg.problem.forcing == 0:
            exact = barenblatt_field(prm, g).values
            summary["max_error_vs_barenblatt"] = float(np.max(np.abs(bundle.u.values - exact)))
    _write_json(out / "simulate.json", summary)
    return EXIT_OK


def _geometry_builder(cfg: RunConfig) -> tuple[GeometryBuilder, float]:
    gs, pr = cfg.geometry, cfg.problem
    x0 = (gs.x0,) + (0.0,) * (pr.n - 1)
    try:
        u, theta_o = barenblatt_window(pr.m, pr.n, gs.t0, x0, gs.R, gs.N)
    except ValueError as exc:
        raise ConfigError(f"geometry.t0: {exc}") from None
    ladder = RadiusLadder(gs.R * gs.r_min_fraction, gs.R, gs.ladder_ratio)
    builder = GeometryBuilder(u, pr.m, gs.R, theta_o * gs.R ** 2, ladder, cfg.b_hat, (gs.t0,) + x0)
    return builder, theta_o


def sample_base_points(builder: GeometryBuilder, count: int, rng: np.random.Generator,
                       fraction: float = 1.0) -> np.ndarray:
    """Uniform points of the base cylinder ``Q_{S,R}`` shrunk by ``fraction``."""
    c = builder.base_center
    pts = np.empty((count, 1 + builder.n))
    pts[:, 0] = c[0] + rng.uniform(-fraction * builder.S, fraction * builder.S, count)
    for i in range(builder.n):
        pts[:, 1 + i] = c[1 + i] + rng.uniform(-fraction * builder.R, fraction * builder.R, count)
    return pts


def overlap_builder(builder: GeometryBuilder) -> tuple[GeometryBuilder, int]:
    """Builder whose ladder reaches ``R / (4 c1)`` and the largest index with ``c1 r <= R``.

    Partners then stay in the base cylinder when the pair points lie in its
    inner half, and the inclusion with the theoretical constant is decidable.
    """
    c1 = engulfing_constants(builder.m, builder.n, builder.b_hat)["c1"]
    ladder = RadiusLadder(builder.R / (4.0 * c1), builder.R, builder.ladder.ratio)
    ob = GeometryBuilder(builder.u, builder.m, builder.R, builder.S, ladder, builder.b_hat, builder.base_center)
    j = int(np.searchsorted(ladder.radii, builder.R / c1 * (1 + 1e-12))) - 1
    return ob, max(j, 0)


def cmd_geometry(cfg: RunConfig, out: Path) -> int:
    gs = cfg.geometry
    builder, theta_o = _geometry_builder(cfg)
    try:
        base = builder.require_base()
    except PreconditionError as exc:
        raise ConfigError(f"geometry: {exc}") from None
    pts = sample_base_points(builder, gs.points, _rng(cfg, 1))
    batch = builder.build(pts)
    rep = verify_geometry_properties(batch, GeometryTolerances(sub_intrinsic_slack=gs.sub_intrinsic_slack))
    ob, level = overlap_builder(builder)
    rng = _rng(cfg, 2)
    pair_pts = sample_base_points(builder, gs.points, rng, gs.pair_fraction)
    ov = check_overlap(ob, pair_pts, level, gs.pairs, rng)
    ok_overlap = math.isfinite(ov.empirical_c1) and ov.empirical_c1 <= ov.theoretical_c1 and ov.failures <= 0
    rep.add(CheckRecord("engulfing", ok_overlap, lhs=ov.empirical_c1, rhs_terms={"theoretical_c1": ov.theoretical_c1},
                        constant=ov.empirical_c1, detail=f"pairs={ov.pairs};failures={ov.failures}"))
    rows = batch.to_rows()
    _write_rows(out / "geometry.csv", ["t", *[f"x{i + 1}" for i in range(builder.n)], "r", "s_tilde", "s", "theta",
                                       "ratio"], rows)
    (out / "geometry_checks.csv").write_text(rep.to_csv())
    _write_json(out / "geometry.json", {"passed": rep.passed, "theta_o": theta_o, "base": base,
                                        "b_hat": cfg.b_hat, "ladder": batch.radii.tolist(),
                                        "constants": engulfing_constants(cfg.problem.m, cfg.problem.n, cfg.b_hat),
                                        "overlap": {"pairs": ov.pairs, "level": level,
                                                    "theoretical_c1": ov.theoretical_c1,
                                                    "empirical_c1": ov.empirical_c1, "failures": ov.failures},
                                        "summary": rep.summary,
                                        "checks": {r.check_id: r.passed for r in rep.records}})
    return EXIT_OK if rep.passed else EXIT_FAIL


def _sample(cfg: RunConfig, grid: SpaceTimeGrid, stream: int, margin: float) -> list[Cylinder]:
    sw = cfg.sweep
    t_range = tuple(sw.t_range) if sw.t_range is not None else None
    try:
        return sample_cylinders(grid, sw.cylinders, _rng(cfg, stream), tuple(sw.r_range), tuple(sw.theta_range),
                                BACKWARD, t_range=t_range, margin=margin)
    except ValueError as exc:
        raise ConfigError(f"sweep.r_range: {exc}") from None


def cmd_regimes(cfg: RunConfig, out: Path) -> int:
    bundle = make_bundle(cfg)
    cyls = _sample(cfg, bundle.grid, 3, 2.0)
    eps, K = cfg.geometry.epsilon, cfg.geometry.K
    chunks = [cyls[i::cfg.threads] for i in range(cfg.threads)]
    parts = _parallel_map(lambda c: regime_sweep(bundle, c, eps, K=K), chunks, cfg.threads)
    rows = [None] * len(cyls)
    for i, part in enumerate(parts):
        for k, row in enumerate(part):
            rows[i + k * cfg.threads] = row
    for cid, row in enumerate(rows):
        row.cid = cid
    write_regime_csv(out / "regimes.csv", rows)
    counts: dict[str, int] = {}
    for row in rows:
        counts[row.label] = counts.get(row.label, 0) + 1
    _write_json(out / "regimes.json", {"cylinders": len(rows), "labels": counts, "epsilon": eps, "K": K})
    return EXIT_OK


def _verify_cylinder(bundle: FieldBundle, q: Cylinder, cfg: RunConfig) -> list[CheckRecord]:
    recs: list[CheckRecord] = []
    rh = ReverseHolderConfig(d=cfg.sweep.d, K=cfg.geometry.K, epsilon=cfg.geometry.epsilon)
    ex = solve_exponent_system(bundle.m, cfg.sweep.d)
    runs: list[tuple[str, Callable[[], VerificationReport]]] = [
        ("energy_oscillation", lambda: check_energy(bundle, q, 1.0, 2.0, "oscillation")),
        ("energy_plain", lambda: check_energy(bundle, q, 1.0, 2.0, "plain")),
        ("sobolev_poincare", lambda: check_sobolev_poincare(bundle, q, cfg.sweep.delta,
                                                            ex if ex.sigma_ok else None)),
    ] + [(f"reverse_holder_{v}", lambda v=v: check_reverse_holder(bundle, q, v, rh))
         for v in ("general", "degenerate", "nondegenerate")]
    for name, run in runs:
        try:
            recs.extend(run().records)
        except (RegimeError, DomainError) as exc:
            recs.append(CheckRecord(name, True, detail=f"skipped: {exc}"))
    return recs


def cmd_verify(cfg: RunConfig, out: Path) -> int:
    bundle = make_bundle(cfg)
    cyls = _sample(cfg, bundle.grid, 4, 4.0)
    per = _parallel_map(lambda q: _verify_cylinder(bundle, q, cfg), cyls, cfg.threads)
    rep = VerificationReport("verify")
    for recs in per:
        rep.extend(recs)
    rng = _rng(cfg, 5)
    for _ in range(cfg.sweep.mean_samples):
        g = rng.gamma(2.0, 1.0, 64)
        eta = rng.uniform(0.0, 1.0, 64)
        for qe in cfg.sweep.mean_exponents:
            rep.extend(check_mean_inequalities(g, qe, eta).records)
    (out / "verify.csv").write_text(rep.to_csv())
    ids = sorted({r.check_id for r in rep.records})
    summary = {}
    for cid in ids:
        recs = rep.by_id(cid)
        done = [r for r in recs if not r.detail.startswith("skipped")]
        summary[cid] = {"rows": len(recs), "evaluated": len(done), "failed": sum(not r.passed for r in recs),
                        "max_constant": rep.max_constant(cid)}
    _write_json(out / "verify.json", {"passed": rep.passed, "source": cfg.problem.source, "checks": summary})
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_cover(cfg: RunConfig, out: Path) -> int:
    cs, pr = cfg.cover, cfg.problem
    prm = BarenblattParams(pr.m, pr.n)
    x0 = (prm.support_radius(cs.t0) - cs.boundary_offset,) + (0.0,) * (pr.n - 1)
    try:
        u, theta_o = barenblatt_window(pr.m, pr.n, cs.t0, x0, cs.R, cs.N)
        P = normalize(u, pr.m, cs.R, theta_o, (cs.t0,) + x0)
    except (ValueError, PreconditionError) as exc:
        raise ConfigError(f"cover: {exc}") from None
    fam = build_family(P.u_tilde, pr.m, RadiusLadder(P.u_tilde.grid.h / 4, 1.0, cfg.geometry.ladder_ratio),
                       b_hat=cfg.b_hat)
    F0 = gradient_power_field(P.u_tilde, 0.5 * (pr.m + 1)).values
    lam_f, tau = lambda_formula(P.C_f, cs.a, cs.b, pr.n, cfg.b_hat)
    extra = {} if cs.c1 is None else {"c1": cs.c1}
    ctx = CoverContext(P, F0, fam, K=cfg.geometry.K, epsilon=cfg.geometry.epsilon, **extra)
    if cs.spikes:
        cells = admissible_spike_cells(ctx, cs.spikes, _rng(cfg, 6), cs.a, cs.b)
        amp = cs.spike_scale * max(lam_f, float(F0.max()))
        F = add_spikes(F0, cells, amp * (1.0 + 0.05 * np.arange(len(cells))))
        ctx = CoverContext(P, F, fam, K=cfg.geometry.K, epsilon=cfg.geometry.epsilon, **extra)
    fitted = ctx.fitted_lambdas(cs.b)
    lam_ab = max(lam_f, fitted["reach"], fitted["case_table"])
    rows, passed = [], True
    for i, k in enumerate(cs.lambda_factors):
        cover = cz_cover(ctx, k * lam_ab, cs.a, cs.b, lam_ab=lam_ab)
        red = redistribution_check(ctx, cover)
        (out / f"cover_{i}.json").write_text(cover.to_json() + "\n")
        ok = cover.report.passed and cover.coverage >= 0.99
        passed &= ok
        rows.append([i, k, k * lam_ab, len(cover.entries), len(cover.selected), cover.coverage,
                     *[cover.case_histogram[c] for c in (1, 2, 3)],
                     max((r.lhs for r in cover.report.by_id("upper_average")), default=math.nan),
                     cover.report.max_constant("lower_average"), red.constant, int(ok)])
    _write_rows(out / "cover.csv", ["index", "factor", "lambda", "entries", "selected", "coverage", "case1_cells",
                                    "case2_cells", "case3_cells", "upper_ratio", "fitted_lower_c",
                                    "redistribution_c", "passed"], rows)
    _write_json(out / "cover.json", {"passed": passed, "theta_o": theta_o, "C_f": P.C_f, "lambda_formula": lam_f,
                                     "tau": tau, "lambda_fitted": fitted, "lambda_ab": lam_ab,
                                     "family_size": int(fam.size), "factors": cs.lambda_factors,
                                     "fitted_lower_c": max((r[10] for r in rows), default=math.nan)})
    return EXIT_OK if passed else EXIT_FAIL


def exponent_levels(m: float, t0: float, r: float, s: float, levels: Sequence[int]) -> tuple[list[FieldBundle], Cylinder]:
    """Barenblatt data around the free boundary at ``t0`` on successively refined windows."""
    prm = BarenblattParams(m, 1)
    xb = prm.support_radius(t0)
    if t0 - 2.5 * s <= 0:
        raise ConfigError("exponent.t0: the window reaches t <= 0")
    half_x, half_t = 2.5 * r, 2.5 * s
    out = []
    for N in levels:
        g = SpaceTimeGrid.uniform(1, (xb - half_x, xb + half_x), (t0 - half_t, t0 + half_t), N, N)
        out.append(FieldBundle(barenblatt_field(prm, g), m))
    return out, Cylinder(t0, (xb,), r, s, CENTERED)


def cmd_exponent(cfg: RunConfig, out: Path) -> int:
    es, m = cfg.exponent, cfg.problem.m
    _need(cfg.problem.n == 1, "problem.n", "the exponent scan runs in one space dimension")
    levels, q = exponent_levels(m, es.t0, es.r, es.s, es.levels)
    try:
        rows = exponent_scan(levels, q, es.p_ladder, es.variant)
    except RegimeError as exc:
        raise ConfigError(f"exponent: {exc}") from None
    p_star = barenblatt_threshold(m)
    table = []
    for row in rows:
        expected = "bounded" if row.p < p_star else "divergent"
        if row.slope >= es.divergence_growth:
            observed = "divergent"
        elif abs(row.slope - 1.0) <= es.stability:
            observed = "bounded"
        else:
            observed = "undecided"
        table.append([row.p, row.lhs, row.rhs, row.ratio, row.slope, row.raw_growth, expected, observed])
    _write_rows(out / "exponent.csv", ["p", "lhs", "rhs", "ratio", "lhs_growth", "raw_growth", "expected",
                                       "observed"], table)
    _write_json(out / "exponent.json", {"m": m, "threshold": p_star, "levels": es.levels, "variant": es.variant,
                                        "rows": [dict(zip(["p", "lhs", "rhs", "ratio", "lhs_growth", "raw_growth",
                                                           "expected", "observed"], r)) for r in table]})
    return EXIT_OK


def cmd_report(cfg: RunConfig, out: Path) -> int:
    merged: dict[str, Any] = {"config": cfg.to_dict()}
    status = EXIT_OK
    for path in sorted(out.glob("*.json")):
        if path.name == "report.json":
            continue
        data = json.loads(path.read_text())
        merged[path.stem] = data
        if isinstance(data, dict) and data.get("passed") is False:
            status = EXIT_FAIL
    merged["passed"] = status == EXIT_OK
    _write_json(out / "report.json", merged)
    return status


HANDLERS: dict[str, Callable[[RunConfig, Path], int]] = {
    "simulate": cmd_simulate, "geometry": cmd_geometry, "regimes": cmd_regimes, "verify": cmd_verify,
    "cover": cmd_cover, "exponent": cmd_exponent, "report": cmd_report,
}


def run(command: str, cfg: RunConfig) -> int:
    """Execute one command; returns the exit status."""
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        return HANDLERS[command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CoveringContradiction as exc:
        print(f"internal contradiction: {exc}", file=sys.stderr)
        return EXIT_CONTRADICTION


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pmelab", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON run configuration")
    ap.add_argument("--seed", type=int, help="seed of all cylinder and pair sampling")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--threads", type=int, help="worker threads for per-cylinder work")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.output.dir = args.out
        if args.threads is not None:
            cfg.threads = args.threads
        cfg.validate()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(args.command, cfg)


if __name__ == "__main__":
    sys.exit(main())
