import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voisched.mdp import Grid, StageCosts, ValueFunction, build_kernel, solve_mdp
from voisched.model import SystemModel, solve_steady_state
from voisched.policy import (Policy, PolicyKind, consistency, decide, estimate_eta, expected_h,
                             search_threshold, threshold_grid, voi, voi_decision_map, voi_field)
from voisched.sim import SimConfig, evaluate_thresholds

A = np.diag([1.3, -1.1])


def test_expected_h_of_constant(paper_solution, steady):
    g = paper_solution.grid
    h = ValueFunction(g, np.full(g.n_cells, 0.37))
    for mean in ([0.0, 0.0], [0.19, -0.3], [5.0, 5.0]):
        assert expected_h(h, mean, steady.Xi) == pytest.approx(0.37, abs=1e-15)


def test_expected_h_symmetric(paper_solution, steady):
    h = paper_solution.h
    for e in ([0.03, 0.01], [0.1, -0.07], [0.15, 0.15]):
        Ae = A @ np.array(e)
        assert expected_h(h, Ae, steady.Xi) == pytest.approx(expected_h(h, -Ae, steady.Xi), abs=1e-15)


def test_expected_h_small_noise_limit(paper_solution):
    g, h = paper_solution.grid, paper_solution.h
    tiny = (1e-3 * g.spacing[0]) ** 2 * np.eye(2)
    rng = np.random.default_rng(0)
    for mean in rng.uniform(-0.15, 0.15, size=(20, 2)):
        assert expected_h(h, mean, tiny) == pytest.approx(h.at(mean), abs=1e-12)


def test_expected_h_matches_kernel(paper_solution, steady):
    k, h, g = paper_solution.kernel, paper_solution.h, paper_solution.grid
    eh = k.expect_wait(h.values)
    for c in (0, 100, g.origin_index, 2500):
        assert expected_h(h, A @ g.points()[c], steady.Xi) == pytest.approx(eh[c], abs=1e-14)


def test_voi_at_origin_is_minus_theta(paper_solution, steady, M):
    assert voi(np.zeros(2), paper_solution.h, A, M, steady.Xi, 0.2) == pytest.approx(-0.2, abs=1e-15)
    assert paper_solution.extra["field"].voi[paper_solution.grid.origin_index] == pytest.approx(-0.2, abs=1e-15)


def test_voi_lower_bound(paper_solution, M):
    fld = paper_solution.extra["field"]
    assert np.all(fld.voi >= fld.wait_cost - 2 * 0.2 - 1e-12)


def test_voi_single_crossing_on_semi_axes(paper_solution):
    g = paper_solution.grid
    V = paper_solution.extra["field"].voi.reshape(g.shape)
    mid = g.mid
    for line in (V[mid[0]:, mid[1]], V[mid[0], mid[1]:], V[:mid[0] + 1, mid[1]][::-1],
                 V[mid[0], :mid[1] + 1][::-1]):
        signs = (line >= 0).astype(int)
        assert np.count_nonzero(np.diff(signs)) == 1


def test_voi_field_symmetric_and_decisions(paper_solution):
    fld = paper_solution.extra["field"]
    r = paper_solution.grid.reflect_index()
    assert np.max(np.abs(fld.voi - fld.voi[r])) < 1e-12
    np.testing.assert_array_equal(fld.decisions, (fld.voi >= 0).astype(np.int8))


def test_decisions_invariant_to_constant_shift(paper_solution):
    s = paper_solution
    shifted = ValueFunction(s.grid, s.h.values + 3.7)
    f2 = voi_field(shifted, s.kernel, s.costs)
    np.testing.assert_allclose(f2.voi, s.extra["field"].voi, atol=1e-12)


# decide

def test_zero_mismatch_never_transmits(paper_solution, M):
    fld = paper_solution.extra["field"]
    for pol in (Policy.voi(fld, M), Policy.quad_threshold(0.1, M), Policy.greedy(0.2, M),
                Policy.norm_ae(0.01, A), Policy.norm_e(0.01), Policy.never()):
        assert decide(pol, np.zeros(2)) == 0


def test_greedy_zero_price_always_transmits(M):
    E = np.random.default_rng(1).normal(size=(50, 2))
    assert np.all(decide(Policy.greedy(0.0, M), E) == 1)


def test_greedy_is_quad_threshold_at_theta(M):
    E = np.random.default_rng(2).uniform(-0.2, 0.2, size=(2000, 2))
    np.testing.assert_array_equal(decide(Policy.greedy(0.2, M), E),
                                  decide(Policy.quad_threshold(0.2, M), E))


def test_norm_policies_and_ties():
    e = np.array([0.3, 0.4])
    assert decide(Policy.norm_e(0.5), e) == 1
    assert decide(Policy.norm_e(0.5000001), e) == 0
    assert decide(Policy.norm_ae(np.linalg.norm(A @ e), A), e) == 1


def test_periodic_and_constant_policies():
    p = Policy.periodic(3, phase=1)
    assert [decide(p, np.ones(2), k) for k in range(7)] == [0, 1, 0, 0, 1, 0, 0]
    assert decide(Policy.always(), np.zeros(2)) == 1
    with pytest.raises(ValueError):
        Policy.periodic(0)


def test_batch_matches_single(paper_solution, M):
    fld = paper_solution.extra["field"]
    E = np.random.default_rng(3).uniform(-0.25, 0.25, size=(300, 2))
    for pol in (Policy.voi(fld, M), Policy.voi(fld, M, "linear"), Policy.norm_ae(0.05, A)):
        batch = decide(pol, E)
        assert batch.dtype == np.int8
        assert list(batch) == [decide(pol, e) for e in E]


def test_voi_policy_reproduces_field_on_cells(paper_solution, M):
    fld = paper_solution.extra["field"]
    pts = paper_solution.grid.points()
    np.testing.assert_array_equal(decide(Policy.voi(fld, M), pts), fld.decisions)


def test_voi_policy_rejects_unknown_lookup(paper_solution, M):
    with pytest.raises(ValueError):
        Policy.voi(paper_solution.extra["field"], M, "cubic")


def test_describe_and_parameter(M):
    p = Policy.quad_threshold(0.1, M)
    assert p.describe() == {"kind": "quad_threshold", "eta": 0.1}
    assert p.parameter == 0.1
    assert Policy.periodic(4).parameter == 4
    assert np.isnan(Policy.always().parameter)


# threshold from the VoI map

def test_paper_eta_estimate(paper_solution):
    est = paper_solution.extra["eta"]
    assert est.status == "ok"
    assert 0 < est.eta <= 0.2
    assert est.consistency >= 0.99


def test_zero_price_eta(paper, steady, M):
    g = Grid((0.1, 0.1), (21, 21))
    sol = solve_mdp(g, A, steady.Xi, M, 0.0)
    fld, est = voi_decision_map(sol.h, sol.kernel, sol.costs)
    assert np.all(fld.decisions == 1)
    assert est.eta == 0.0


def test_threshold_outside_box(steady, M):
    g = Grid((0.02, 0.02), (11, 11))
    sol = solve_mdp(g, A, steady.Xi, M, 1.0)
    fld, est = voi_decision_map(sol.h, sol.kernel, sol.costs)
    assert est.eta is None and est.status == "threshold outside truncation region"


def test_consistency_excludes_ties(paper_solution):
    fld = paper_solution.extra["field"]
    frac, n = consistency(fld, float(fld.wait_cost[5]))
    assert n < fld.grid.n_cells


# threshold search

def test_threshold_grid():
    np.testing.assert_allclose(threshold_grid(0, 0.2, 4), [0.05, 0.1, 0.15, 0.2])
    with pytest.raises(ValueError):
        threshold_grid(0.2, 0.2)
    with pytest.raises(ValueError):
        threshold_grid(0, 1, 0)


def test_search_single_candidate():
    res = search_threshold("quad_threshold", lambda e: (e ** 2, 0.0), 0.0, 0.3, steps=1)
    assert res.eta_star == 0.3 and res.cost == pytest.approx(0.09)


def test_search_parallel_matches_serial():
    f = lambda e: ((e - 0.13) ** 2, 0.01)
    a = search_threshold("norm_e", f, 0.0, 0.2, 64)
    b = search_threshold("norm_e", f, 0.0, 0.2, 64, threads=4)
    assert a.eta_star == b.eta_star and a.eta_star == pytest.approx(0.13125)


def test_search_high_price_goes_to_top():
    # stable plant, tiny noise: the mismatch never reaches any candidate threshold
    I = np.eye(2)
    m = SystemModel(np.diag([0.5, -0.4]), 0.1 * I, I, 1e-10 * I, 1e-10 * I, I, I, theta=50.0,
                    x0_mean=np.zeros(2), x0_cov=np.zeros((2, 2)))
    st_ = solve_steady_state(m)
    cfg = SimConfig(T=200, trials=20, seed=4)

    def ev(etas):
        b = evaluate_thresholds(m, st_, "quad_threshold", etas, cfg)
        return b.mean("J"), b.stderr("J")

    res = search_threshold("quad_threshold", ev, 0.0, 50.0, 16, vectorized=True)
    assert res.eta_star == 50.0


@settings(max_examples=30, deadline=None)
@given(e=st.lists(st.floats(-0.3, 0.3), min_size=2, max_size=2))
def test_voi_policy_symmetric(paper_solution, M, e):
    pol = Policy.voi(paper_solution.extra["field"], M)
    e = np.array(e)
    g = paper_solution.grid
    # off-lattice points exactly on a rounding edge may round asymmetrically
    frac = np.abs(e / g.spacing - np.floor(e / g.spacing) - 0.5)
    if np.all(frac > 1e-9):
        assert decide(pol, e) == decide(pol, -e)
