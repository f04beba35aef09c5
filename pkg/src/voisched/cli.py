"""Command line entry point: solve | iterate | policy | simulate | sweep | check."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .io import ConfigError, RunConfig, load_config, write_csv, write_json
from .mdp import Grid, GridError, build_kernel, grid_for_theta, StageCosts, value_iterate
from .model import (ModelError, NotDiagonalizableError, SolverError, diagonalize,
                    solve_steady_state, validate_model)
from .policy import Policy, PolicyKind, search_threshold, voi_decision_map
from .sim import (SimConfig, evaluate_thresholds, monte_carlo, simulate_episode,
                  theoretical_average_cost, tradeoff_sweep)

log = logging.getLogger("voisched")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CHECK = 0, 1, 2, 3
RESIDUAL_TOL = 1e-8


class NonConvergence(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


class Run:
    """Shared state of one invocation; computes upstream artifacts on demand."""

    def __init__(self, cfg: RunConfig, out: Path, threads: int):
        self.cfg, self.out, self.threads = cfg, out, threads
        self.model = cfg.system()
        self._steady = None
        self._sols = {}

    @property
    def stamp(self) -> dict:
        return {"config_hash": self.cfg.hash, "seed": self.cfg.seed}

    def csv(self, name, rows):
        p = write_csv(self.out / name, rows, self.stamp)
        log.info("wrote %s", p)

    def json(self, name, payload):
        p = write_json(self.out / name, payload, self.stamp)
        log.info("wrote %s", p)

    @property
    def steady(self):
        if self._steady is None:
            self._steady = solve_steady_state(self.model)
            bad = {k: v for k, v in self._steady.residuals.items()
                   if k.endswith("riccati") and not v < RESIDUAL_TOL}
            if bad:
                raise SolverError(f"Riccati residuals above {RESIDUAL_TOL}: {bad}", max(bad.values()))
        return self._steady

    @property
    def M(self):
        return self.steady.cost_matrix(self.model.A, self.cfg.solver["cost_variant"])

    def base_grid(self) -> Grid:
        g = self.cfg.grid
        return Grid(tuple(g["upper"]), tuple(g["counts"]))

    def grid_for(self, theta: float) -> Grid:
        base = self.base_grid()
        if not self.cfg.grid["scale_with_theta"]:
            return base
        return grid_for_theta(self.M, self.steady.Xi, theta, base.spacing, base.upper)

    def solve(self, theta: float | None = None, grid: Grid | None = None, strict: bool = True):
        theta = self.model.theta if theta is None else theta
        grid = self.base_grid() if grid is None else grid
        key = (theta, grid.counts, tuple(grid.upper))
        if key not in self._sols:
            s = self.cfg.solver
            kernel = build_kernel(grid, self.model.A, self.steady.Xi, clamp=s["clamp"])
            costs = StageCosts.quadratic(grid, self.M, theta)
            h, J, rep = value_iterate(grid, kernel, costs, tol=s["tol"], max_iter=s["max_iter"])
            fld, eta = voi_decision_map(h, kernel, costs)
            self._sols[key] = dict(grid=grid, kernel=kernel, costs=costs, h=h, J=J, report=rep,
                                   field=fld, eta=eta)
        sol = self._sols[key]
        if strict and not sol["report"].converged:
            raise NonConvergence(f"value iteration did not reach span {sol['report'].tol} "
                                 f"within {sol['report'].iterations} sweeps")
        return sol

    def sim_config(self, policy: Policy) -> SimConfig:
        s = self.cfg.sim
        return SimConfig(T=s["T"], trials=s["trials"], seed=self.cfg.seed, policy=policy,
                         burn_in=s["burn_in"])


def _need(block: dict, key: str, block_name: str):
    if block.get(key) is None:
        raise ConfigError(f"{block_name}.{key}: required for this policy kind")
    return block[key]


def build_policy(run: Run) -> Policy:
    p = run.cfg.policy
    try:
        kind = PolicyKind(p["kind"])
    except ValueError:
        raise ConfigError(f"policy.kind: unknown kind {p['kind']!r}") from None
    if kind is PolicyKind.VOI:
        return Policy.voi(run.solve()["field"], run.M, lookup=p["lookup"])
    if kind is PolicyKind.QUAD_THRESHOLD:
        eta = p["eta"]
        if eta is None:
            eta = run.solve()["eta"].eta
            if eta is None:
                raise NonConvergence("no VoI threshold inside the truncation box; set policy.eta")
        return Policy.quad_threshold(eta, run.M)
    if kind is PolicyKind.GREEDY:
        return Policy.greedy(run.model.theta, run.M)
    if kind is PolicyKind.NORM_AE:
        return Policy.norm_ae(_need(p, "eta", "policy"), run.model.A)
    if kind is PolicyKind.NORM_E:
        return Policy.norm_e(_need(p, "eta", "policy"))
    if kind is PolicyKind.PERIODIC:
        return Policy.periodic(_need(p, "period", "policy"), p["phase"])
    return Policy.always() if kind is PolicyKind.ALWAYS else Policy.never()


def _cell_rows(grid: Grid, cols: dict):
    n = grid.dim
    yield [f"e{i+1}" for i in range(n)] + list(cols)
    pts = grid.points()
    vals = list(cols.values())
    for c in range(grid.n_cells):
        yield [*pts[c], *(v[c] for v in vals)]


def cmd_solve(run: Run) -> int:
    viol = validate_model(run.model)
    for v in viol:
        log.warning("model assumption: %s", v)
    fatal = [v for v in viol if v.assumption != "input_weight_shape"]
    if fatal:
        raise ConfigError("model violates " + ", ".join(v.assumption for v in fatal))
    st = run.steady
    m = run.model
    run.json("steady_state.json", {
        "model": {k: getattr(m, k) for k in ("A", "B", "C", "W", "V", "Q", "R", "theta")},
        "S": st.S, "L": st.L, "Ps": st.Ps, "K": st.K, "Sigma": st.Sigma, "Xi": st.Xi,
        "Ps_post": st.Ps_post, "M": run.M, "residuals": st.residuals,
        "violations": [str(v) for v in viol],
    })
    return EXIT_OK


def cmd_iterate(run: Run) -> int:
    sol = run.solve(strict=False)
    run.csv("value_function.csv", _cell_rows(sol["grid"], {"h": sol["h"].values}))
    run.json("iteration.json", {"Jstar": sol["J"], "grid": sol["grid"].to_dict(),
                                "report": sol["report"].to_dict(), "theta": run.model.theta})
    if not sol["report"].converged:
        raise NonConvergence("value iteration did not converge; artifacts written anyway")
    return EXIT_OK


def cmd_policy(run: Run) -> int:
    sol = run.solve()
    fld, eta = sol["field"], sol["eta"]
    run.csv("decision_map.csv", _cell_rows(sol["grid"], {"voi": fld.voi, "decision": fld.decisions}))
    run.json("policy.json", {"theta": run.model.theta, "eta": eta.eta, "status": eta.status,
                             "consistency": eta.consistency, "n_compared": eta.n_compared,
                             "eh_shift": fld.eh_shift, "transmit_share": float(fld.decisions.mean())})
    return EXIT_OK


def cmd_simulate(run: Run) -> int:
    pol = build_policy(run)
    cfg = run.sim_config(pol)
    summ = monte_carlo(run.model, run.steady, cfg, threads=run.threads)
    payload = summ.to_dict()
    if pol.kind is PolicyKind.VOI:
        sol = run.solve()
        tc = theoretical_average_cost(run.model, run.steady, sol["kernel"].expect_transmit(sol["h"].values))
        payload["theoretical_psi"] = tc.__dict__
    run.json("summary.json", payload)
    run.csv("trials.csv", summ.trial_rows())
    if run.cfg.sim["trace"]:
        run.csv("trace.csv", simulate_episode(run.model, run.steady, cfg).rows())
    return EXIT_OK


def threshold_range(family: str, theta: float, M, Sigma) -> float:
    """Upper end of the threshold search interval for each family."""
    if family == "quad_threshold":
        return theta
    lam = np.linalg.eigvalsh(M if family == "norm_e" else Sigma)[0]
    if not lam > 0:
        raise ConfigError(f"sweep: {family} range needs a positive definite weight")
    return float(np.sqrt(theta / lam))


def cmd_sweep(run: Run) -> int:
    sw = run.cfg.sweep
    st = run.steady
    eta_rows = [["theta", "eta_estimate", "consistency", "Jstar", "cells"]]
    cost_rows = [["theta", "family", "eta_star", "cost", "cost_stderr"]]
    for th in sw["thetas"]:
        th = float(th)
        sol = run.solve(th, run.grid_for(th))
        e = sol["eta"]
        eta_rows.append([th, np.nan if e.eta is None else e.eta, e.consistency, sol["J"],
                         sol["grid"].n_cells])
        model = run.model.with_theta(th)
        cfg = run.sim_config(Policy.always())
        for fam in sw["families"]:
            hi = threshold_range(fam, th, run.M, st.Sigma)

            def evaluate(etas, fam=fam):
                b = evaluate_thresholds(model, st, fam, etas, cfg)
                return b.mean("J"), b.stderr("J")

            res = search_threshold(fam, evaluate, 0.0, hi, sw["steps"], vectorized=True)
            cost_rows.append([th, fam, res.eta_star, res.cost, res.stderr])
        g = monte_carlo(model, st, run.sim_config(Policy.greedy(th, run.M)), run.threads)
        cost_rows.append([th, "greedy", th, g.mean("J"), g.stderr("J")])
    run.csv("voi_eta.csv", eta_rows)
    run.csv("threshold_sweep.csv", cost_rows)

    cfg = run.sim_config(Policy.always())
    etas = np.linspace(0, max(sw["thetas"]), sw["tradeoff_steps"] + 1)[1:]
    b = evaluate_thresholds(run.model, st, "quad_threshold", etas, cfg)
    trade = [["policy", "param", "rate", "regulation", "regulation_stderr", "J"]]
    for i, eta in enumerate(etas):
        trade.append(["quad_threshold", eta, b.mean("rate")[i], b.mean("regulation")[i],
                      b.stderr("regulation")[i], b.mean("J")[i]])
    for r in tradeoff_sweep(run.model, st, [Policy.periodic(p) for p in sw["periods"]], cfg,
                            run.threads):
        trade.append([r.kind, r.param, r.rate, r.regulation, r.regulation_stderr, r.J])
    run.csv("tradeoff.csv", trade)
    return EXIT_OK


def cmd_check(run: Run) -> int:
    sol = run.solve()
    fld = sol["field"]
    try:
        diag = diagonalize(run.model.A, run.steady.Xi)
        shape = diag.is_signed_permutation()
    except NotDiagonalizableError as exc:
        log.warning("skipping monotonicity checks: %s", exc)
        diag, shape = None, False
    trunc, ttol = None, None
    ck = run.cfg.check
    theta = run.model.theta
    if ck["truncation_outer_counts"] is not None:
        outer = Grid.from_spacing(sol["grid"].spacing, tuple(ck["truncation_outer_counts"]))
        osol = run.solve(grid=outer)
        trunc = analysis.check_truncation(osol["h"], osol["J"], sol["h"], sol["J"])
        ttol = ck["truncation_tol"] if ck["truncation_tol"] is not None else 5e-2 * theta
    rep = analysis.structure_report(
        {"h": sol["h"].values, "Eh_wait": fld.eh_wait, "voi": fld.voi}, sol["grid"], sol["h"],
        theta, sol["eta"].eta, diag, trunc, ttol, shape_checks=shape)
    run.json("structure.json", rep.to_dict())
    if not rep.passed:
        log.error("structural checks failed: %s", ", ".join(rep.failures()))
        return EXIT_CHECK
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "iterate": cmd_iterate, "policy": cmd_policy,
            "simulate": cmd_simulate, "sweep": cmd_sweep, "check": cmd_check}


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="voisched", description=__doc__)
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, type=Path, help="YAML or JSON run configuration")
    ap.add_argument("--out", type=Path, default=None, help="output directory (overrides output.dir)")
    ap.add_argument("--seed", type=int, default=None, help="overrides sim.seed")
    ap.add_argument("--threads", type=int, default=1, help="worker cap")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed)
        out = args.out if args.out is not None else Path(cfg.output["dir"])
        run = Run(cfg, out, max(1, args.threads))
        return COMMANDS[args.command](run)
    except (ConfigError, ModelError, GridError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, NonConvergence) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
