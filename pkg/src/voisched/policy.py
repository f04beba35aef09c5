"""Scheduling laws, the value-of-information field and threshold search."""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .mdp import Grid, KernelCache, StageCosts, ValueFunction, _RowBuilder


class PolicyKind(str, enum.Enum):
    VOI = "voi"
    QUAD_THRESHOLD = "quad_threshold"
    GREEDY = "greedy"
    NORM_AE = "norm_ae"
    NORM_E = "norm_e"
    PERIODIC = "periodic"
    ALWAYS = "always"
    NEVER = "never"


@dataclass(frozen=True)
class VoiField:
    """VoI(c) = c'Mc + E[h(Ac + xi)] - theta - E[h(xi)] on every cell c."""

    grid: Grid
    voi: np.ndarray
    wait_cost: np.ndarray
    eh_wait: np.ndarray
    eh_shift: float
    theta: float

    @property
    def decisions(self) -> np.ndarray:
        # ties transmit
        return (self.voi >= 0).astype(np.int8)

    def boundary_mask(self) -> np.ndarray:
        """Cells whose decision differs from an axis neighbour."""
        D = self.decisions.reshape(self.grid.shape).astype(np.int8)
        out = np.zeros(D.shape, dtype=bool)
        for ax in range(D.ndim):
            diff = np.diff(D, axis=ax) != 0
            lo = [slice(None)] * D.ndim
            hi = [slice(None)] * D.ndim
            lo[ax], hi[ax] = slice(0, -1), slice(1, None)
            out[tuple(lo)] |= diff
            out[tuple(hi)] |= diff
        return out.ravel()


@dataclass(frozen=True)
class EtaEstimate:
    eta: float | None
    cell: int | None
    consistency: float
    n_compared: int
    status: str = "ok"


@dataclass(frozen=True)
class Policy:
    kind: PolicyKind
    params: dict = field(default_factory=dict)

    @classmethod
    def voi(cls, fld: VoiField, M, lookup: str = "nearest") -> "Policy":
        if lookup not in ("nearest", "linear"):
            raise ValueError(f"lookup must be 'nearest' or 'linear', got {lookup!r}")
        interp = None
        if lookup == "linear":
            from scipy.interpolate import RegularGridInterpolator
            axes = [fld.grid.axis_centers(i) for i in range(fld.grid.dim)]
            interp = RegularGridInterpolator(axes, fld.eh_wait.reshape(fld.grid.shape))
        return cls(PolicyKind.VOI, {"field": fld, "M": np.asarray(M, dtype=float),
                                    "lookup": lookup, "interp": interp})

    @classmethod
    def quad_threshold(cls, eta: float, M) -> "Policy":
        return cls(PolicyKind.QUAD_THRESHOLD, {"eta": _knob(eta), "M": np.asarray(M, dtype=float)})

    @classmethod
    def greedy(cls, theta: float, M) -> "Policy":
        return cls(PolicyKind.GREEDY, {"theta": _knob(theta), "M": np.asarray(M, dtype=float)})

    @classmethod
    def norm_ae(cls, eta: float, A) -> "Policy":
        return cls(PolicyKind.NORM_AE, {"eta": _knob(eta), "A": np.asarray(A, dtype=float)})

    @classmethod
    def norm_e(cls, eta: float) -> "Policy":
        return cls(PolicyKind.NORM_E, {"eta": _knob(eta)})

    @classmethod
    def periodic(cls, period: int, phase: int = 0) -> "Policy":
        if int(period) < 1:
            raise ValueError("period must be a positive integer")
        return cls(PolicyKind.PERIODIC, {"period": int(period), "phase": int(phase)})

    @classmethod
    def always(cls) -> "Policy":
        return cls(PolicyKind.ALWAYS)

    @classmethod
    def never(cls) -> "Policy":
        return cls(PolicyKind.NEVER)

    @property
    def parameter(self) -> float:
        """Scalar knob of the policy, used as the sweep coordinate."""
        p = self.params
        return float(p.get("eta", p.get("theta", p.get("period", np.nan))))

    def describe(self) -> dict:
        out = {"kind": self.kind.value}
        for k in ("eta", "theta", "period", "phase", "lookup"):
            if k in self.params:
                v = self.params[k]
                out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


def _knob(x):
    """Scalar threshold, or one threshold per batch row."""
    a = np.asarray(x, dtype=float)
    return float(a) if a.ndim == 0 else a


def _quad(E, M):
    return np.sum((E @ M) * E, axis=-1)


def decide(policy: Policy, e, k: int = 0):
    """Transmission decision(s) for mismatch e (one vector or a batch of rows)."""
    E = np.asarray(e, dtype=float)
    single = E.ndim == 1
    E = np.atleast_2d(E)
    p = policy.params
    kind = policy.kind
    if kind is PolicyKind.QUAD_THRESHOLD:
        d = _quad(E, p["M"]) >= p["eta"]
    elif kind is PolicyKind.GREEDY:
        d = _quad(E, p["M"]) >= p["theta"]
    elif kind is PolicyKind.NORM_AE:
        d = np.linalg.norm(E @ p["A"].T, axis=1) >= p["eta"]
    elif kind is PolicyKind.NORM_E:
        d = np.linalg.norm(E, axis=1) >= p["eta"]
    elif kind is PolicyKind.PERIODIC:
        d = np.full(len(E), (k - p["phase"]) % p["period"] == 0)
    elif kind is PolicyKind.ALWAYS:
        d = np.ones(len(E), dtype=bool)
    elif kind is PolicyKind.NEVER:
        d = np.zeros(len(E), dtype=bool)
    elif kind is PolicyKind.VOI:
        fld: VoiField = p["field"]
        if p["interp"] is None:
            eh = fld.eh_wait[fld.grid.nearest(E)]
        else:
            top = np.array([fld.grid.axis_centers(i)[-1] for i in range(fld.grid.dim)])
            eh = p["interp"](np.clip(E, -top, top))
        d = _quad(E, p["M"]) + eh - fld.theta - fld.eh_shift >= 0
    else:
        raise ValueError(f"unknown policy kind {kind}")
    d = d.astype(np.int8)
    return int(d[0]) if single else d


def expected_h(h: ValueFunction, mean, Xi, grid: Grid | None = None, clamp: bool = True) -> float:
    """E[h(mean + xi)] with the same lattice weights the kernel uses."""
    grid = h.grid if grid is None else grid
    row = _RowBuilder(grid, Xi, clamp).row(np.asarray(mean, dtype=float))
    return float(row @ h.values)


def voi(e, h: ValueFunction, A, M, Xi, theta: float, clamp: bool = True) -> float:
    """VoI(e) = e'Me + E[h(Ae + xi)] - theta - E[h(xi)]."""
    e = np.asarray(e, dtype=float)
    zero = np.zeros_like(e)
    return float(e @ M @ e + expected_h(h, np.asarray(A) @ e, Xi, clamp=clamp)
                 - theta - expected_h(h, zero, Xi, clamp=clamp))


def voi_field(h: ValueFunction, kernel: KernelCache, costs: StageCosts) -> VoiField:
    eh = kernel.expect_wait(h.values)
    e0 = kernel.expect_transmit(h.values)
    v = costs.wait + eh - costs.theta - e0
    return VoiField(grid=h.grid, voi=v, wait_cost=costs.wait, eh_wait=eh, eh_shift=e0,
                    theta=costs.theta)


def consistency(fld: VoiField, eta: float) -> tuple[float, int]:
    """Share of non-tie cells where (VoI >= 0) agrees with (e'Me >= eta)."""
    keep = (fld.voi != 0) & (fld.wait_cost != eta)
    same = (fld.voi[keep] >= 0) == (fld.wait_cost[keep] >= eta)
    n = int(keep.sum())
    return (float(same.mean()) if n else 1.0), n


def estimate_eta(fld: VoiField) -> EtaEstimate:
    """Equivalent quadratic threshold of a VoI field.

    At a zero crossing s*, eta = theta + E[h(xi)] - E[h(As* + xi)], which on
    the lattice is wait_cost - VoI at a cell adjacent to a sign change.  The
    boundary cell whose eta best reproduces the VoI map is returned.
    """
    dec = fld.decisions
    if fld.theta == 0:
        c, n = consistency(fld, 0.0)
        return EtaEstimate(0.0, fld.grid.origin_index, c, n)
    cand = np.flatnonzero(fld.boundary_mask())
    if cand.size == 0:
        status = "all cells transmit" if dec.all() else "threshold outside truncation region"
        c = float(dec.mean()) if dec.all() else float(1 - dec.mean())
        return EtaEstimate(None, None, c, fld.grid.n_cells, status)
    etas = fld.wait_cost[cand] - fld.voi[cand]
    best_i, best = None, (-1.0, 0)
    for i in np.argsort(etas, kind="stable"):
        c = consistency(fld, float(etas[i]))
        if c[0] > best[0]:
            best_i, best = i, c
    return EtaEstimate(float(etas[best_i]), int(cand[best_i]), best[0], best[1])


def voi_decision_map(h: ValueFunction, kernel: KernelCache, costs: StageCosts):
    """VoI field on every cell and the matching quadratic threshold."""
    fld = voi_field(h, kernel, costs)
    return fld, estimate_eta(fld)


@dataclass(frozen=True)
class ThresholdSearch:
    family: str
    etas: np.ndarray
    costs: np.ndarray
    stderrs: np.ndarray
    eta_star: float
    cost: float
    stderr: float


def threshold_grid(lo: float, hi: float, steps: int = 64) -> np.ndarray:
    """``steps`` uniform points on (lo, hi]."""
    if steps < 1 or not hi > lo:
        raise ValueError(f"empty threshold range ({lo}, {hi}] with {steps} steps")
    return lo + (hi - lo) * np.arange(1, steps + 1) / steps


def search_threshold(family: str, evaluate: Callable, lo: float, hi: float, steps: int = 64,
                     threads: int = 1, vectorized: bool = False) -> ThresholdSearch:
    """Brute-force argmin of an empirical cost over thresholds on (lo, hi].

    ``evaluate(eta)`` returns ``(mean cost, standard error)`` and is expected
    to reuse the same random numbers for every eta.  With ``vectorized`` it
    receives the whole threshold array and returns two arrays.
    """
    etas = threshold_grid(lo, hi, steps)
    if vectorized:
        c, s = evaluate(etas)
        res = list(zip(np.asarray(c), np.asarray(s)))
    elif threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            res = list(ex.map(evaluate, etas))
    else:
        res = [evaluate(e) for e in etas]
    costs = np.array([r[0] for r in res])
    ses = np.array([r[1] for r in res])
    # ties go to the largest threshold, i.e. the fewest transmissions
    i = len(costs) - 1 - int(np.argmin(costs[::-1]))
    return ThresholdSearch(family, etas, costs, ses, float(etas[i]), float(costs[i]), float(ses[i]))
