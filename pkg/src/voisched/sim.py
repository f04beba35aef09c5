"""Closed-loop Monte Carlo of plant, Kalman sender, one-step-delay channel,
remote estimator and certainty-equivalence controller."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import SteadyState, SystemModel, conform_input_weight
from .policy import Policy, decide

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e12
CHUNK = 256
METRICS = ("J", "regulation", "rate", "psi")


@dataclass(frozen=True)
class SimConfig:
    T: int = 1000
    trials: int = 2000
    seed: int = 0
    policy: Policy = field(default_factory=Policy.always)
    burn_in: int = 0
    track_full_state: bool = True

    def __post_init__(self):
        if self.T < 1 or self.trials < 1:
            raise ValueError(f"need T >= 1 and trials >= 1, got T={self.T}, trials={self.trials}")
        if not 0 <= self.burn_in < self.T:
            raise ValueError(f"burn_in must lie in [0, T), got {self.burn_in}")


def cov_factor(M) -> np.ndarray:
    """F with F F' = M; Cholesky when possible, symmetric square root otherwise."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh((M + M.T) / 2)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(trial),)))


@dataclass
class NoiseBatch:
    x0: np.ndarray  # (B, n)
    w: np.ndarray   # (B, T, n)
    v: np.ndarray   # (B, T+1, p)


def draw_noise(model: SystemModel, seed: int, first: int, count: int, T: int) -> NoiseBatch:
    n, p = model.n, model.p
    F0, Fw, Fv = cov_factor(model.x0_cov), cov_factor(model.W), cov_factor(model.V)
    x0 = np.empty((count, n))
    w = np.empty((count, T, n))
    v = np.empty((count, T + 1, p))
    for b in range(count):
        rng = trial_rng(seed, first + b)
        x0[b] = model.x0_mean + F0 @ rng.standard_normal(n)
        w[b] = rng.standard_normal((T, n)) @ Fw.T
        v[b] = rng.standard_normal((T + 1, p)) @ Fv.T
    return NoiseBatch(x0, w, v)


@dataclass
class EpisodeTrace:
    """Signals of one episode; index k runs over 0..T (states) or 0..T-1 (inputs).

    Batched traces carry a leading trial axis on every array.
    """

    x: np.ndarray
    xs: np.ndarray
    xc: np.ndarray
    u: np.ndarray
    delta: np.ndarray
    e: np.ndarray
    g: np.ndarray
    xi: np.ndarray
    w: np.ndarray
    A: np.ndarray
    diverged: bool = False

    @property
    def T(self) -> int:
        return self.delta.shape[-1]

    def mismatch_residual(self) -> float:
        """max |e_{k+1} - (1 - delta_k) A e_k - xi_k|."""
        e = self.e
        pred = (1 - self.delta[..., None]) * (e[..., :-1, :] @ self.A.T) + self.xi
        return float(np.max(np.abs(e[..., 1:, :] - pred)))

    def remote_error_residual(self) -> float:
        """max |ec_{k+1} - A ec_k + delta_k A e_k - w_k| with ec = x - xc."""
        ec = self.x - self.xc
        Ae = self.e[..., :-1, :] @ self.A.T
        pred = ec[..., :-1, :] @ self.A.T - self.delta[..., None] * Ae + self.w
        return float(np.max(np.abs(ec[..., 1:, :] - pred)))

    def rows(self):
        n = self.x.shape[1]
        head = (["k"] + [f"x{i+1}" for i in range(n)] + [f"e{i+1}" for i in range(n)]
                + ["delta", "g"])
        yield head
        for k in range(self.T):
            yield [k, *self.x[k], *self.e[k], int(self.delta[k]), self.g[k]]


def _qf(E, M):
    return np.sum((E @ M) * E, axis=1)


def _rollout(model: SystemModel, steady: SteadyState, policy: Policy, noise: NoiseBatch,
             burn_in: int = 0, record: bool = False, reps: int = 1):
    """Roll the loop forward; with ``reps`` > 1 every trial is replayed ``reps``
    times (row r*B + b uses trial b) so batched policy parameters share noise."""
    model = conform_input_weight(model)
    A, B, C, Q, R = model.A, model.B, model.C, model.Q, model.R
    K, L = steady.K, steady.L
    M = steady.cost_matrix(A)
    theta = model.theta
    T = noise.w.shape[1]
    nb = noise.w.shape[0] * reps
    x = np.tile(noise.x0, (reps, 1))
    xs = np.broadcast_to(model.x0_mean, x.shape).copy()
    xc = xs.copy()
    sums = {k: np.zeros(nb) for k in METRICS}
    max_e = np.zeros(nb)
    diverged = np.zeros(nb, dtype=bool)
    tr = None
    if record:
        tr = {k: [] for k in ("x", "xs", "xc", "u", "delta", "e", "g", "xi")}
    for k in range(T):
        e = xs - xc
        d = decide(policy, e, k)
        u = -xc @ L.T
        q = _qf(e, M)
        g = np.where(d == 1, theta, q)
        if k >= burn_in:
            sums["J"] += g
            sums["regulation"] += q
            sums["rate"] += d
            sums["psi"] += (_qf(x, Q)
                            + _qf(u, R) + theta * d)
        max_e = np.maximum(max_e, np.linalg.norm(e, axis=1))
        wk, vk1 = noise.w[:, k], noise.v[:, k + 1]
        if reps > 1:
            wk, vk1 = np.tile(wk, (reps, 1)), np.tile(vk1, (reps, 1))
        xn = x @ A.T + u @ B.T + wk
        pred = xs @ A.T + u @ B.T
        y = xn @ C.T + vk1
        xs_n = pred + (y - pred @ C.T) @ K.T
        xc_n = xc @ A.T + u @ B.T + d[:, None] * (e @ A.T)
        if record:
            xi = (A @ (x - xs).T + wk.T).T @ C.T @ K.T + vk1 @ K.T
            for name, val in (("x", x), ("xs", xs), ("xc", xc), ("u", u), ("delta", d),
                              ("e", e), ("g", g), ("xi", xi)):
                tr[name].append(val.copy())
        # NaN fails the comparison, so it is caught too
        bad = ~(np.max(np.abs(xn), axis=1) <= DIVERGENCE_LIMIT)
        if bad.any():
            diverged |= bad
            xn[bad] = xs_n[bad] = xc_n[bad] = 0.0
            if record:
                break
        x, xs, xc = xn, xs_n, xc_n
    if record:
        tr["x"].append(x.copy())
        tr["xs"].append(xs.copy())
        tr["xc"].append(xc.copy())
        tr["e"].append(xs - xc)
        tr = {k: np.stack(v, axis=1) for k, v in tr.items()}
    steps = T - burn_in
    metrics = {k: s / steps for k, s in sums.items()}
    return metrics, max_e, diverged, tr


def simulate_batch(model: SystemModel, steady: SteadyState, cfg: SimConfig, first: int = 0,
                   count: int = 1) -> EpisodeTrace:
    """Traces of trials first..first+count-1 with a leading trial axis.

    Recording stops for the whole batch at the first divergent step.
    """
    noise = draw_noise(model, cfg.seed, first, count, cfg.T)
    _, _, div, tr = _rollout(model, steady, cfg.policy, noise, cfg.burn_in, record=True)
    if div.any():
        log.warning("%d episode(s) diverged (|x| > %.0e)", int(div.sum()), DIVERGENCE_LIMIT)
    kT = tr["delta"].shape[1]
    return EpisodeTrace(
        x=tr["x"], xs=tr["xs"], xc=tr["xc"], u=tr["u"], delta=tr["delta"], e=tr["e"], g=tr["g"],
        xi=tr["xi"], w=noise.w[:, :kT], A=np.asarray(model.A), diverged=bool(div.any()))


def simulate_episode(model: SystemModel, steady: SteadyState, cfg: SimConfig,
                     trial: int = 0) -> EpisodeTrace:
    b = simulate_batch(model, steady, cfg, trial, 1)
    return EpisodeTrace(x=b.x[0], xs=b.xs[0], xc=b.xc[0], u=b.u[0], delta=b.delta[0], e=b.e[0],
                        g=b.g[0], xi=b.xi[0], w=b.w[0], A=b.A, diverged=b.diverged)


@dataclass
class MonteCarloSummary:
    trials: int
    T: int
    seed: int
    burn_in: int
    policy: dict
    per_trial: dict
    max_e: np.ndarray
    diverged: np.ndarray

    @property
    def n_diverged(self) -> int:
        return int(self.diverged.sum())

    def stat(self, metric: str) -> dict:
        x = self.per_trial[metric][~self.diverged]
        n = x.size
        if n == 0:
            return {"mean": float("nan"), "std": float("nan"), "stderr": float("nan")}
        sd = float(np.std(x, ddof=1)) if n > 1 else 0.0
        return {"mean": float(np.mean(x)), "std": sd, "stderr": float(sd / np.sqrt(n))}

    def mean(self, metric: str) -> float:
        return self.stat(metric)["mean"]

    def stderr(self, metric: str) -> float:
        return self.stat(metric)["stderr"]

    @property
    def max_e_norm(self) -> float:
        return float(np.max(self.max_e))

    def to_dict(self) -> dict:
        return {"trials": self.trials, "T": self.T, "seed": self.seed, "burn_in": self.burn_in,
                "policy": self.policy, "diverged": self.n_diverged,
                "max_e_norm": self.max_e_norm,
                "metrics": {k: self.stat(k) for k in METRICS}}

    def trial_rows(self):
        yield ["trial", *METRICS, "max_e_norm", "diverged"]
        for i in range(self.trials):
            yield [i, *(self.per_trial[k][i] for k in METRICS), self.max_e[i], int(self.diverged[i])]


def monte_carlo(model: SystemModel, steady: SteadyState, cfg: SimConfig,
                threads: int = 1) -> MonteCarloSummary:
    """Run ``cfg.trials`` independent episodes; trial i always uses stream i of ``cfg.seed``."""
    starts = list(range(0, cfg.trials, CHUNK))

    def run(s):
        cnt = min(CHUNK, cfg.trials - s)
        noise = draw_noise(model, cfg.seed, s, cnt, cfg.T)
        met, mx, div, _ = _rollout(model, steady, cfg.policy, noise, cfg.burn_in)
        return met, mx, div

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    per_trial = {k: np.concatenate([p[0][k] for p in parts]) for k in METRICS}
    max_e = np.concatenate([p[1] for p in parts])
    div = np.concatenate([p[2] for p in parts])
    if div.any():
        log.warning("%d of %d trials diverged", int(div.sum()), cfg.trials)
    return MonteCarloSummary(cfg.trials, cfg.T, cfg.seed, cfg.burn_in, cfg.policy.describe(),
                             per_trial, max_e, div)


BATCH_ROWS = 16384
THRESHOLD_FAMILIES = {
    "quad_threshold": lambda eta, model, steady: Policy.quad_threshold(eta, steady.cost_matrix(model.A)),
    "norm_ae": lambda eta, model, steady: Policy.norm_ae(eta, model.A),
    "norm_e": lambda eta, model, steady: Policy.norm_e(eta),
}


@dataclass
class ThresholdBatch:
    """Per-threshold Monte Carlo statistics on common random numbers."""

    family: str
    etas: np.ndarray
    stats: dict  # metric -> {"mean": array, "stderr": array}
    diverged: np.ndarray

    def mean(self, metric: str) -> np.ndarray:
        return self.stats[metric]["mean"]

    def stderr(self, metric: str) -> np.ndarray:
        return self.stats[metric]["stderr"]


def evaluate_thresholds(model: SystemModel, steady: SteadyState, family: str, etas,
                        cfg: SimConfig) -> ThresholdBatch:
    """Simulate a threshold family at every eta, reusing each trial's noise across etas."""
    if family not in THRESHOLD_FAMILIES:
        raise ValueError(f"unknown threshold family {family!r}")
    etas = np.asarray(etas, dtype=float)
    reps = len(etas)
    chunk = max(1, min(CHUNK, BATCH_ROWS // reps))
    per = {k: [] for k in METRICS}
    div = []
    for s in range(0, cfg.trials, chunk):
        cnt = min(chunk, cfg.trials - s)
        noise = draw_noise(model, cfg.seed, s, cnt, cfg.T)
        pol = THRESHOLD_FAMILIES[family](np.repeat(etas, cnt), model, steady)
        met, _, d, _ = _rollout(model, steady, pol, noise, cfg.burn_in, reps=reps)
        for k in METRICS:
            per[k].append(met[k].reshape(reps, cnt))
        div.append(d.reshape(reps, cnt))
    div = np.concatenate(div, axis=1)
    stats = {}
    for k in METRICS:
        x = np.where(div, np.nan, np.concatenate(per[k], axis=1))
        n = np.sum(~div, axis=1)
        sd = np.nanstd(x, axis=1, ddof=1) if cfg.trials > 1 else np.zeros(reps)
        stats[k] = {"mean": np.nanmean(x, axis=1), "stderr": sd / np.sqrt(np.maximum(n, 1))}
    return ThresholdBatch(family, etas, stats, div.sum(axis=1))


@dataclass(frozen=True)
class TheoreticalCost:
    total: float
    tr_SW: float
    tr_AtSigmaAPs: float
    tr_SigmaW: float
    expected_h: float


def theoretical_average_cost(model: SystemModel, steady: SteadyState,
                             expected_h: float) -> TheoreticalCost:
    """tr(SW + A'Sigma A Ps + Sigma W) + E[h(xi)], Ps the filtered error covariance."""
    A, W = model.A, model.W
    a = float(np.trace(steady.S @ W))
    b = float(np.trace(A.T @ steady.Sigma @ A @ steady.Ps_post))
    c = float(np.trace(steady.Sigma @ W))
    return TheoreticalCost(a + b + c + expected_h, a, b, c, float(expected_h))


@dataclass(frozen=True)
class TradeoffRow:
    kind: str
    param: float
    rate: float
    regulation: float
    J: float
    rate_stderr: float
    regulation_stderr: float


def tradeoff_sweep(model: SystemModel, steady: SteadyState, policies, cfg: SimConfig,
                   threads: int = 1) -> list[TradeoffRow]:
    """Rate and regulation cost of each policy on common random numbers."""
    rows = []
    for pol in policies:
        s = monte_carlo(model, steady, SimConfig(cfg.T, cfg.trials, cfg.seed, pol, cfg.burn_in),
                        threads)
        rows.append(TradeoffRow(pol.kind.value, pol.parameter, s.mean("rate"), s.mean("regulation"),
                                s.mean("J"), s.stderr("rate"), s.stderr("regulation")))
    return rows


@dataclass(frozen=True)
class StabilityReport:
    n_states: int
    n_outside: int
    max_drift_outside: float
    m_radius: float
    d_radius_sq: float
    drift_ok: bool
    max_e_norm: float | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def drift(e, delta, A, Xi) -> np.ndarray:
    """E[|e+|^2 | e] - |e|^2 for e+ = (1 - delta) A e + xi."""
    E = np.atleast_2d(np.asarray(e, dtype=float))
    Ae = E @ np.asarray(A).T
    return (1 - np.asarray(delta)) * np.sum(Ae * Ae, axis=1) + np.trace(Xi) - np.sum(E * E, axis=1)


def stability_diagnostics(model: SystemModel, steady: SteadyState, policy: Policy, box_upper,
                          counts: int = 41, scale: float = 3.0,
                          max_e_norm: float | None = None) -> StabilityReport:
    """Foster drift check outside M = {(Ae)'Sigma(Ae) <= 2 theta} and
    D = {|e|^2 <= tr(Xi) + 1} on a counts^n lattice spanning ``scale`` times the box."""
    A, Xi = model.A, steady.Xi
    M = steady.cost_matrix(A)
    up = scale * np.broadcast_to(np.asarray(box_upper, dtype=float), (model.n,))
    axes = [np.linspace(-u, u, counts) for u in up]
    E = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
    m_rad = 2.0 * model.theta
    d_rad = float(np.trace(Xi)) + 1.0
    outside = (_qf(E, M) > m_rad) & (np.sum(E * E, axis=1) > d_rad)
    d = decide(policy, E[outside], 0) if outside.any() else np.zeros(0)
    dv = drift(E[outside], d, A, Xi) if outside.any() else np.zeros(0)
    worst = float(dv.max()) if dv.size else float("-inf")
    return StabilityReport(len(E), int(outside.sum()), worst, m_rad, d_rad,
                           bool(worst < -1), max_e_norm)
