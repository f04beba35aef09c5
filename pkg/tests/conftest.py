import numpy as np
import pytest

from voisched.mdp import Grid, solve_mdp
from voisched.model import paper_system, solve_steady_state
from voisched.policy import voi_decision_map

PAPER_GRID = Grid((0.2, 0.2), (61, 61))


@pytest.fixture(scope="session")
def paper():
    return paper_system(0.2)


@pytest.fixture(scope="session")
def steady(paper):
    return solve_steady_state(paper)


@pytest.fixture(scope="session")
def M(paper, steady):
    return steady.cost_matrix(paper.A)


@pytest.fixture(scope="session")
def paper_solution(paper, steady, M):
    sol = solve_mdp(PAPER_GRID, paper.A, steady.Xi, M, paper.theta)
    fld, eta = voi_decision_map(sol.h, sol.kernel, sol.costs)
    sol.extra.update(field=fld, eta=eta)
    return sol


def random_system(rng, n, m, p=None, radius=None):
    """Random controllable/observable system with PD weights.

    With ``radius`` the state matrix is rescaled to that spectral radius.
    """
    from voisched.model import SystemModel, validate_model
    p = n if p is None else p
    while True:
        A = rng.normal(size=(n, n)) * 0.8
        if radius is not None:
            A *= radius / np.abs(np.linalg.eigvals(A)).max()
        B = rng.normal(size=(n, m))
        C = rng.normal(size=(p, n))
        G = rng.normal(size=(n, n))
        H = rng.normal(size=(p, p))
        sys = SystemModel(A, B, C, G @ G.T / n + 0.01 * np.eye(n), H @ H.T / p + 0.01 * np.eye(p),
                          np.eye(n), np.eye(m), theta=0.1)
        if not validate_model(sys):
            return sys


ACCEPTANCE = {}


def record(n: int, ok: bool, detail: str) -> None:
    """Log one acceptance criterion outcome; printed again in the terminal summary."""
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
