"""Structural checks on computed value functions, VoI fields and thresholds."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .mdp import Grid, GridError, ValueFunction, restrict
from .model import DiagonalizedModel

STRUCT_TOL = 1e-6
SYMMETRY_TOL = 1e-8


def _split(f, grid: Grid | None = None):
    if isinstance(f, ValueFunction):
        return f.grid, np.asarray(f.values, dtype=float)
    if grid is None:
        raise ValueError("raw values need a grid")
    return grid, np.asarray(f, dtype=float).ravel()


def _require_symmetric(grid: Grid) -> None:
    for i in range(grid.dim):
        c = grid.axis_centers(i)
        if not np.array_equal(c, -c[::-1]):
            raise GridError(f"axis {i} of the lattice is not symmetric about 0")


def check_symmetry(f, grid: Grid | None = None) -> float:
    """max |f(e) - f(-e)| over the lattice."""
    grid, v = _split(f, grid)
    _require_symmetric(grid)
    return float(np.max(np.abs(v - v[grid.reflect_index()])))


@dataclass
class MonotonicityReport:
    violations: list
    worst: list
    tol: float

    @property
    def total(self) -> int:
        return int(sum(self.violations))

    @property
    def max_worst(self) -> float:
        return float(max(self.worst)) if self.worst else 0.0


def check_axis_monotonicity(f, diag: DiagonalizedModel | None = None, grid: Grid | None = None,
                            tol: float = STRUCT_TOL) -> MonotonicityReport:
    """Count axis steps away from 0 along which f drops by more than ``tol``.

    f must live on the lattice of s = U^{-1} e.  When ``diag`` is a signed
    permutation (diagonal A) that lattice is the e-lattice itself.
    """
    grid, v = _split(f, grid)
    _require_symmetric(grid)
    F = v.reshape(grid.shape)
    counts, worst = [], []
    for ax, mid in enumerate(grid.mid):
        d = np.diff(F, axis=ax)
        j = np.arange(d.shape[ax])
        # step j -> j+1 moves outward when j >= mid, inward otherwise
        sign = np.where(j >= mid, 1.0, -1.0)
        shape = [1] * F.ndim
        shape[ax] = -1
        drop = -(d * sign.reshape(shape))
        counts.append(int(np.sum(drop > tol)))
        worst.append(float(max(0.0, drop.max())))
    return MonotonicityReport(counts, worst, tol)


def lattice_rays(grid: Grid):
    """Primitive integer directions from the origin and their lengths in cells."""
    mid = np.asarray(grid.mid)
    offs = np.stack(np.meshgrid(*[np.arange(-m, m + 1) for m in mid], indexing="ij"),
                    axis=-1).reshape(-1, grid.dim)
    g = np.zeros(len(offs), dtype=int)
    for i in range(grid.dim):
        g = np.gcd(g, np.abs(offs[:, i]))
    prim = offs[g == 1]
    with np.errstate(divide="ignore"):
        steps = np.where(prim != 0, mid // np.maximum(np.abs(prim), 1), np.iinfo(int).max)
    return prim, steps.min(axis=1)


@dataclass
class RayReport:
    n_rays: int
    violations: int
    worst: float
    tol: float


def check_quasiconvexity_rays(f, grid: Grid | None = None, tol: float = STRUCT_TOL) -> RayReport:
    """f must be nondecreasing along every lattice ray leaving the origin."""
    grid, v = _split(f, grid)
    _require_symmetric(grid)
    F = v.reshape(grid.shape)
    mid = np.asarray(grid.mid)
    prim, tmax = lattice_rays(grid)
    bad, worst = 0, 0.0
    for d, t in zip(prim, tmax):
        idx = mid + np.outer(np.arange(t + 1), d)
        vals = F[tuple(idx.T)]
        drop = -np.diff(vals)
        bad += int(np.sum(drop > tol))
        worst = max(worst, float(drop.max(initial=0.0)))
    return RayReport(len(prim), bad, worst, tol)


@dataclass
class BoundsReport:
    violations: int
    worst_cell: int | None
    worst_excess: float
    anchor: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.violations == 0 and self.anchor == 0.0


def check_bounds(h: ValueFunction, theta: float, tol: float = STRUCT_TOL) -> BoundsReport:
    """-tol <= h <= theta + tol everywhere and h(0) == 0."""
    v = np.asarray(h.values, dtype=float)
    excess = np.maximum(v - (theta + tol), -tol - v)
    n = int(np.sum(excess > 0))
    cell = int(np.argmax(excess)) if n else None
    return BoundsReport(n, cell, float(max(0.0, excess.max())), float(v[h.grid.origin_index]), tol)


def check_eta(eta: float | None, theta: float) -> bool:
    """0 < eta <= theta; theta = 0 admits only eta = 0."""
    if eta is None or not np.isfinite(eta):
        return False
    if theta == 0:
        return eta == 0
    return 0 < eta <= theta * (1 + 1e-12)


@dataclass
class TruncationReport:
    max_dh: float
    dJ: float
    inner_counts: tuple
    outer_counts: tuple


def check_truncation(h_outer: ValueFunction, J_outer: float, h_inner: ValueFunction,
                     J_inner: float) -> TruncationReport:
    """Compare the restriction of an outer solve with an inner solve on the same cells."""
    r = restrict(h_outer, h_inner.grid)
    return TruncationReport(float(np.max(np.abs(r.values - h_inner.values))),
                            float(abs(J_outer - J_inner)), h_inner.grid.counts,
                            h_outer.grid.counts)


@dataclass
class StructureReport:
    theta: float
    symmetry: dict = field(default_factory=dict)
    monotonicity: dict = field(default_factory=dict)
    quasiconvexity: dict = field(default_factory=dict)
    bounds: dict = field(default_factory=dict)
    eta: float | None = None
    eta_ok: bool | None = None
    truncation: dict | None = None
    truncation_tol: float | None = None
    tol: float = STRUCT_TOL
    symmetry_tol: float = SYMMETRY_TOL

    def failures(self) -> list[str]:
        out = [f"symmetry[{k}]={v:.3g}" for k, v in self.symmetry.items() if v >= self.symmetry_tol]
        out += [f"monotonicity[{k}]" for k, v in self.monotonicity.items() if sum(v["violations"])]
        out += [f"quasiconvexity[{k}]" for k, v in self.quasiconvexity.items() if v["violations"]]
        if self.bounds and (self.bounds["violations"] or self.bounds["anchor"] != 0.0):
            out.append("bounds")
        if self.eta_ok is False:
            out.append(f"eta={self.eta}")
        if self.truncation is not None and self.truncation_tol is not None \
                and self.truncation["max_dh"] >= self.truncation_tol:
            out.append(f"truncation={self.truncation['max_dh']:.3g}")
        return out

    @property
    def passed(self) -> bool:
        return not self.failures()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        d["failures"] = self.failures()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def structure_report(fields: dict, grid: Grid, h: ValueFunction, theta: float,
                     eta: float | None = None, diag: DiagonalizedModel | None = None,
                     truncation: TruncationReport | None = None,
                     truncation_tol: float | None = None, tol: float = STRUCT_TOL,
                     shape_checks: bool = True) -> StructureReport:
    """Run every check on each named field (values on ``grid``).

    ``shape_checks`` enables the monotonicity and ray scans, which are only
    meaningful when the grid coordinates are the eigen-coordinates of A.
    """
    rep = StructureReport(theta=theta, tol=tol)
    for name, vals in fields.items():
        rep.symmetry[name] = check_symmetry(vals, grid)
        if not shape_checks:
            continue
        mono = check_axis_monotonicity(vals, diag, grid, tol)
        rep.monotonicity[name] = {"violations": mono.violations, "worst": mono.worst}
        rays = check_quasiconvexity_rays(vals, grid, tol)
        rep.quasiconvexity[name] = {"violations": rays.violations, "worst": rays.worst,
                                    "rays": rays.n_rays}
    b = check_bounds(h, theta, tol)
    rep.bounds = asdict(b)
    if eta is not None or theta > 0:
        rep.eta, rep.eta_ok = eta, check_eta(eta, theta)
    if truncation is not None:
        rep.truncation = asdict(truncation)
        rep.truncation_tol = truncation_tol
    return rep
