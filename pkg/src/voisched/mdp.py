"""Truncated, discretized average-cost MDP on the estimate mismatch e.

State e lives on a symmetric lattice of cell centers; the next state is
(1 - delta) A e + xi with xi ~ N(0, Xi).  Transition weights are the Gaussian
density at destination centers times the cell volume, with mass that falls
outside the box either clamped onto the nearest boundary cell or dropped,
then renormalized.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

WINDOW_SIGMAS = 8.5
REGULARIZATION = 1e-12
MAX_DENSE_CELLS = 12_000
SPAN_TOL = 1e-9
MAX_SWEEPS = 10_000


class SingularCovarianceError(ValueError):
    pass


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Box [-upper, upper] split into ``counts`` cells per axis (odd, >= 3)."""

    upper: np.ndarray
    counts: tuple

    def __post_init__(self):
        up = np.atleast_1d(np.asarray(self.upper, dtype=float)).copy()
        counts = tuple(int(c) for c in np.atleast_1d(self.counts))
        if len(counts) == 1 and up.size > 1:
            counts = counts * up.size
        if up.size == 1 and len(counts) > 1:
            up = np.full(len(counts), up[0])
        if up.size != len(counts):
            raise GridError(f"upper has {up.size} entries, counts has {len(counts)}")
        if np.any(up <= 0):
            raise GridError("box half-widths must be positive")
        for c in counts:
            if c < 3 or c % 2 == 0:
                raise GridError(f"cell counts must be odd and >= 3, got {counts}")
        up.setflags(write=False)
        object.__setattr__(self, "upper", up)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_spacing(cls, spacing, counts) -> "Grid":
        counts = tuple(int(c) for c in np.atleast_1d(counts))
        spacing = np.broadcast_to(np.asarray(spacing, dtype=float), (len(counts),))
        return cls(spacing * np.asarray(counts) / 2.0, counts)

    @property
    def lower(self) -> np.ndarray:
        return -self.upper

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def shape(self) -> tuple:
        return self.counts

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.counts))

    @property
    def spacing(self) -> np.ndarray:
        return 2.0 * self.upper / np.asarray(self.counts)

    @property
    def mid(self) -> np.ndarray:
        return np.asarray(self.counts) // 2

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def origin_index(self) -> int:
        return int(np.ravel_multi_index(tuple(self.mid), self.counts))

    def axis_centers(self, i: int) -> np.ndarray:
        # integer offsets keep the lattice exactly antisymmetric
        return (np.arange(self.counts[i]) - self.mid[i]) * self.spacing[i]

    def points(self) -> np.ndarray:
        """Cell centers, shape (n_cells, dim), C order."""
        axes = [self.axis_centers(i) for i in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def nearest_multi(self, e) -> np.ndarray:
        """Per-axis index of the cell containing e, clipped to the box."""
        e = np.asarray(e, dtype=float)
        idx = np.rint(e / self.spacing).astype(np.int64) + self.mid
        return np.clip(idx, 0, np.asarray(self.counts) - 1)

    def nearest(self, e) -> np.ndarray:
        """Flat index of the cell containing each row of e (clipped)."""
        idx = self.nearest_multi(e)
        return np.ravel_multi_index(tuple(np.moveaxis(idx, -1, 0)), self.counts)

    def reflect_index(self) -> np.ndarray:
        """Flat index of -e for every cell."""
        return np.arange(self.n_cells)[::-1]

    def is_aligned_subgrid(self, inner: "Grid", rtol: float = 1e-9) -> bool:
        return (inner.dim == self.dim
                and np.allclose(inner.spacing, self.spacing, rtol=rtol, atol=0)
                and all(ci <= co for ci, co in zip(inner.counts, self.counts)))

    def to_dict(self) -> dict:
        return {"upper": self.upper.tolist(), "counts": list(self.counts)}


@dataclass
class ValueFunction:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.values.size != self.grid.n_cells:
            raise GridError(f"{self.values.size} values for {self.grid.n_cells} cells")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("value function has non-finite entries")

    def as_array(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)

    def at(self, e) -> np.ndarray:
        return self.values[self.grid.nearest(e)]


def regularized_cov(Xi, regularize: bool = True) -> np.ndarray:
    Xi = np.atleast_2d(np.asarray(Xi, dtype=float))
    Xi = (Xi + Xi.T) / 2
    lo = float(np.min(np.linalg.eigvalsh(Xi)))
    if lo > 0:
        return Xi
    if not regularize:
        raise SingularCovarianceError(f"Xi is singular, smallest eigenvalue {lo:.3e}")
    return Xi + REGULARIZATION * np.eye(Xi.shape[0])


def transition_density(y, e, delta, A, Xi, regularize: bool = True) -> float:
    """delta * p_xi(y) + (1 - delta) * p_xi(y - A e)."""
    Xi = regularized_cov(Xi, regularize)
    y = np.asarray(y, dtype=float)
    mean = np.zeros_like(y) if delta else np.asarray(A, dtype=float) @ np.asarray(e, dtype=float)
    d = y - mean
    n = d.size
    quad = d @ np.linalg.solve(Xi, d)
    return float(np.exp(-0.5 * quad) / np.sqrt((2 * np.pi) ** n * np.linalg.det(Xi)))


def _is_diagonal(M, rtol: float = 1e-12) -> bool:
    M = np.asarray(M)
    off = M - np.diag(np.diag(M))
    return bool(np.max(np.abs(off), initial=0.0) <= rtol * max(1.0, np.max(np.abs(M))))


def _axis_row(mean: float, sigma: float, spacing: float, count: int, clamp: bool) -> np.ndarray:
    """1-D lattice weights for N(mean, sigma^2) onto ``count`` cells."""
    mid = count // 2
    half = int(np.ceil(WINDOW_SIGMAS * sigma / spacing)) + 1
    center = int(np.rint(mean / spacing))
    j = np.arange(center - half, center + half + 1)
    z2 = ((j * spacing - mean) / sigma) ** 2
    # shift before exp so tiny sigma cannot underflow every weight
    w = np.exp(-0.5 * (z2 - z2.min())) * spacing
    idx = j + mid
    if clamp:
        idx = np.clip(idx, 0, count - 1)
    else:
        keep = (idx >= 0) & (idx < count)
        idx, w = idx[keep], w[keep]
    row = np.bincount(idx, weights=w, minlength=count)
    tot = row.sum()
    if tot <= 0:
        raise ValueError("transition row has no mass inside the box")
    return row / tot


def _full_row(mean, grid: Grid, chol: np.ndarray, sd: np.ndarray, clamp: bool) -> np.ndarray:
    """n-D lattice weights for N(mean, Xi) with correlated Xi (Cholesky ``chol``)."""
    axes, idxs = [], []
    for i in range(grid.dim):
        h = grid.spacing[i]
        half = int(np.ceil(WINDOW_SIGMAS * sd[i] / h)) + 1
        c = int(np.rint(mean[i] / h))
        j = np.arange(c - half, c + half + 1)
        axes.append(j * h - mean[i])
        idxs.append(j + grid.mid[i])
    mesh = np.meshgrid(*axes, indexing="ij")
    d = np.stack([m.ravel() for m in mesh], axis=1)
    z = np.linalg.solve(chol, d.T)
    z2 = np.sum(z * z, axis=0)
    w = np.exp(-0.5 * (z2 - z2.min())) * grid.cell_volume
    imesh = np.meshgrid(*idxs, indexing="ij")
    ii = np.stack([m.ravel() for m in imesh], axis=1)
    counts = np.asarray(grid.counts)
    if clamp:
        ii = np.clip(ii, 0, counts - 1)
    else:
        keep = np.all((ii >= 0) & (ii < counts), axis=1)
        ii, w = ii[keep], w[keep]
    flat = np.ravel_multi_index(tuple(ii.T), grid.counts)
    row = np.bincount(flat, weights=w, minlength=grid.n_cells)
    return row / row.sum()


class _RowBuilder:
    def __init__(self, grid: Grid, Xi, clamp: bool, regularize: bool = True):
        self.grid = grid
        self.clamp = clamp
        self.Xi = regularized_cov(Xi, regularize)
        if self.Xi.shape != (grid.dim, grid.dim):
            raise GridError(f"Xi is {self.Xi.shape}, grid dimension is {grid.dim}")
        self.sd = np.sqrt(np.diag(self.Xi))
        self.separable = _is_diagonal(self.Xi)
        self.chol = None if self.separable else np.linalg.cholesky(self.Xi)

    def axis_rows(self, mean) -> list:
        g = self.grid
        return [_axis_row(float(mean[i]), self.sd[i], g.spacing[i], g.counts[i], self.clamp)
                for i in range(g.dim)]

    def row(self, mean) -> np.ndarray:
        mean = np.asarray(mean, dtype=float)
        if self.separable:
            return _outer(self.axis_rows(mean))
        return _full_row(mean, self.grid, self.chol, self.sd, self.clamp)


def _outer(rows) -> np.ndarray:
    out = rows[0]
    for r in rows[1:]:
        out = np.multiply.outer(out, r)
    return np.ravel(out)


@dataclass
class KernelCache:
    """Transition weights for every (cell, action).

    ``factors`` holds one count_i x count_i matrix per axis when both A and Xi
    are diagonal (the kernel is their Kronecker product); otherwise ``dense``
    holds the full n_cells x n_cells matrix for delta = 0.  ``transmit_row`` is
    the shared delta = 1 row.
    """

    grid: Grid
    transmit_row: np.ndarray
    factors: list | None = None
    dense: np.ndarray | None = None
    clamp: bool = True

    @property
    def factored(self) -> bool:
        return self.factors is not None

    def expect_wait(self, values) -> np.ndarray:
        """E[f(A c + xi)] for every cell c."""
        values = np.asarray(values, dtype=float).ravel()
        if self.factors is None:
            return self.dense @ values
        X = values.reshape(self.grid.shape)
        for ax, F in enumerate(self.factors):
            X = np.moveaxis(np.tensordot(F, X, axes=([1], [ax])), 0, ax)
        return X.ravel()

    def expect_transmit(self, values) -> float:
        """E[f(xi)]."""
        return float(self.transmit_row @ np.asarray(values, dtype=float).ravel())

    def row(self, cell: int, delta: int) -> np.ndarray:
        if delta:
            return self.transmit_row.copy()
        if self.factors is None:
            return self.dense[cell].copy()
        multi = np.unravel_index(cell, self.grid.shape)
        return _outer([F[i] for F, i in zip(self.factors, multi)])

    def save(self, path) -> None:
        """Write the cache as an .npz archive (see README, "Kernel cache format")."""
        arrays = {"upper": self.grid.upper, "counts": np.asarray(self.grid.counts),
                  "transmit_row": self.transmit_row, "clamp": np.asarray(self.clamp)}
        if self.factors is not None:
            for i, F in enumerate(self.factors):
                arrays[f"factor_{i}"] = F
        else:
            arrays["dense"] = self.dense
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "KernelCache":
        with np.load(path) as z:
            grid = Grid(z["upper"], tuple(z["counts"]))
            factors = None
            if "dense" not in z:
                factors = [z[f"factor_{i}"] for i in range(grid.dim)]
            return cls(grid=grid, transmit_row=z["transmit_row"], factors=factors,
                       dense=z["dense"] if "dense" in z else None, clamp=bool(z["clamp"]))


def build_kernel(grid: Grid, A, Xi, clamp: bool = True, regularize: bool = True,
                 force_dense: bool = False) -> KernelCache:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    rb = _RowBuilder(grid, Xi, clamp, regularize)
    origin_rows = rb.axis_rows(np.zeros(grid.dim)) if rb.separable else None
    transmit = _outer(origin_rows) if rb.separable else rb.row(np.zeros(grid.dim))
    if rb.separable and _is_diagonal(A, rtol=0.0) and not force_dense:
        factors = []
        for i in range(grid.dim):
            a = A[i, i]
            F = np.stack([_axis_row(a * x, rb.sd[i], grid.spacing[i], grid.counts[i], clamp)
                          for x in grid.axis_centers(i)])
            factors.append(F)
        return KernelCache(grid=grid, transmit_row=transmit, factors=factors, clamp=clamp)
    if grid.n_cells > MAX_DENSE_CELLS:
        raise GridError(f"{grid.n_cells} cells is too many for a dense kernel "
                        f"(limit {MAX_DENSE_CELLS}); diagonal A and Xi allow a factored kernel")
    means = grid.points() @ A.T
    dense = np.empty((grid.n_cells, grid.n_cells))
    for c in range(grid.n_cells):
        dense[c] = rb.row(means[c])
    return KernelCache(grid=grid, transmit_row=transmit, dense=dense, clamp=clamp)


def stage_cost(e, delta, theta, A, Sigma, variant: str = "one-step-delay"):
    """theta * delta + (1 - delta) * e'A'Sigma A e (or e'Sigma e without delay)."""
    e = np.asarray(e, dtype=float)
    z = e @ np.asarray(A, dtype=float).T if variant == "one-step-delay" else e
    if variant not in ("one-step-delay", "delay-free"):
        raise ValueError(f"unknown cost variant {variant!r}")
    q = np.einsum("...i,ij,...j->...", z, np.asarray(Sigma, dtype=float), z)
    return theta * delta + (1 - delta) * q


@dataclass(frozen=True)
class StageCosts:
    """Per-cell cost of waiting (e'Me) and the price of transmitting."""

    wait: np.ndarray
    theta: float

    @classmethod
    def quadratic(cls, grid: Grid, M, theta: float) -> "StageCosts":
        pts = grid.points()
        return cls(np.einsum("ci,ij,cj->c", pts, np.asarray(M, dtype=float), pts), float(theta))

    @classmethod
    def from_model(cls, grid: Grid, A, Sigma, theta, variant="one-step-delay") -> "StageCosts":
        return cls(stage_cost(grid.points(), 0, theta, A, Sigma, variant), float(theta))


def bellman_backup(J, kernel: KernelCache, costs: StageCosts):
    """One application of the Bellman operator.

    Returns ``(TJ, decisions)``; decisions are 1 where transmitting is strictly
    cheaper (ties keep delta = 0).
    """
    vals = J.values if isinstance(J, ValueFunction) else np.asarray(J, dtype=float)
    wait = costs.wait + kernel.expect_wait(vals)
    send = costs.theta + kernel.expect_transmit(vals)
    dec = (send < wait).astype(np.int8)
    return ValueFunction(kernel.grid, np.minimum(wait, send)), dec


def span(x) -> float:
    return float(np.max(x) - np.min(x))


@dataclass
class IterationReport:
    iterations: int
    span_residuals: list
    lam: float
    converged: bool
    tol: float

    @property
    def contraction_factor(self) -> float:
        """Largest ratio of successive span residuals over the second half of the run."""
        r = np.asarray(self.span_residuals)
        r = r[r > 1e3 * np.finfo(float).eps]
        if r.size < 3:
            return 0.0
        tail = r[r.size // 2:]
        ratios = tail[1:] / tail[:-1] if tail.size > 1 else r[1:] / r[:-1]
        return float(np.max(ratios))

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "lambda": self.lam, "converged": self.converged,
                "tol": self.tol, "final_span": self.span_residuals[-1] if self.span_residuals else None,
                "contraction_factor": self.contraction_factor,
                "span_residuals": list(self.span_residuals)}


def value_iterate(grid: Grid, kernel: KernelCache, costs: StageCosts,
                  tol: float = SPAN_TOL, max_iter: int = MAX_SWEEPS, h0=None):
    """Relative value iteration anchored at the origin cell.

    Iterates h <- T h - (T h)(0) starting from zero; (T h)(0) is the running
    average-cost estimate.  Stops when span(T h - h) < tol.  Returns
    ``(h, Jstar, report)``.
    """
    o = grid.origin_index
    h = np.zeros(grid.n_cells) if h0 is None else np.asarray(h0, dtype=float).ravel() - np.ravel(h0)[o]
    spans = []
    lam = 0.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        Th, _ = bellman_backup(h, kernel, costs)
        Th = Th.values
        lam = float(Th[o])
        sp = span(Th - h)
        h = Th - lam
        spans.append(sp)
        if sp < tol:
            converged = True
            break
    if not converged:
        log.warning("value iteration stopped after %d sweeps with span %.3e", it, spans[-1])
    report = IterationReport(iterations=it, span_residuals=spans, lam=lam, converged=converged, tol=tol)
    return ValueFunction(grid, h), lam, report


@dataclass
class MDPSolution:
    grid: Grid
    kernel: KernelCache
    costs: StageCosts
    h: ValueFunction
    Jstar: float
    report: IterationReport
    extra: dict = field(default_factory=dict)


def solve_mdp(grid: Grid, A, Xi, M, theta: float, clamp: bool = True,
              tol: float = SPAN_TOL, max_iter: int = MAX_SWEEPS) -> MDPSolution:
    """Build the kernel and cost for waiting cost e'Me and run value iteration."""
    kernel = build_kernel(grid, A, Xi, clamp=clamp)
    costs = StageCosts.quadratic(grid, M, theta)
    h, J, rep = value_iterate(grid, kernel, costs, tol=tol, max_iter=max_iter)
    return MDPSolution(grid, kernel, costs, h, J, rep)


def restrict(h: ValueFunction, inner) -> ValueFunction:
    """Restrict h to a centered, cell-aligned sub-box and re-anchor at the origin.

    ``inner`` is a Grid or the half-widths of the sub-box.
    """
    g = h.grid
    if not isinstance(inner, Grid):
        up = np.broadcast_to(np.asarray(inner, dtype=float), (g.dim,))
        counts = up * 2 / g.spacing
        rc = np.rint(counts)
        if np.any(np.abs(counts - rc) > 1e-6) or np.any(rc.astype(int) % 2 == 0):
            raise GridError("inner box is not aligned with the grid cells")
        inner = Grid.from_spacing(g.spacing, tuple(int(c) for c in rc))
    if not g.is_aligned_subgrid(inner):
        raise GridError("inner grid is not a cell-aligned sub-box of the outer grid")
    sl = tuple(slice(mo - mi, mo + mi + 1) for mo, mi in zip(g.mid, inner.mid))
    sub = h.as_array()[sl].ravel()
    return ValueFunction(inner, sub - sub[inner.origin_index])


def grid_for_theta(M, Xi, theta: float, spacing, min_upper) -> Grid:
    """Lattice at fixed spacing whose box covers the greedy region e'Me <= theta
    plus four noise standard deviations on every axis."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    sd = np.sqrt(np.diag(np.atleast_2d(Xi)))
    reach = np.sqrt(theta * np.diag(np.linalg.pinv(M))) + 4 * sd
    up = np.maximum(np.broadcast_to(np.asarray(min_upper, dtype=float), reach.shape), reach)
    dx = np.broadcast_to(np.asarray(spacing, dtype=float), reach.shape)
    counts = 2 * np.ceil(up / dx - 0.5).astype(int) + 1
    return Grid.from_spacing(dx, tuple(int(c) for c in counts))
