import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voisched.mdp import (Grid, GridError, KernelCache, SingularCovarianceError, StageCosts,
                          ValueFunction, bellman_backup, build_kernel, grid_for_theta, restrict,
                          solve_mdp, span, stage_cost, transition_density, value_iterate)

A = np.diag([1.3, -1.1])
XI = np.diag([0.0015, 0.0011])


def brute_force_rows(grid, A, Xi, e, delta):
    """Independent lattice weights: loop over every lattice point within 9 sigma."""
    sd = np.sqrt(np.diag(Xi))
    mean = np.zeros(2) if delta else A @ e
    dx = grid.spacing
    lo = np.floor((mean - 9 * sd) / dx).astype(int)
    hi = np.ceil((mean + 9 * sd) / dx).astype(int)
    row = np.zeros(grid.shape)
    inv = np.linalg.inv(Xi)
    for i in range(lo[0], hi[0] + 1):
        for j in range(lo[1], hi[1] + 1):
            y = np.array([i, j]) * dx
            d = y - mean
            w = np.exp(-0.5 * d @ inv @ d)
            a = min(max(i + grid.mid[0], 0), grid.counts[0] - 1)
            b = min(max(j + grid.mid[1], 0), grid.counts[1] - 1)
            row[a, b] += w
    return row.ravel() / row.sum()


def brute_force_backup(J, grid, A, Xi, M, theta):
    pts = grid.points()
    out = np.empty(grid.n_cells)
    send = theta + brute_force_rows(grid, A, Xi, None, 1) @ J
    for c, e in enumerate(pts):
        wait = e @ M @ e + brute_force_rows(grid, A, Xi, e, 0) @ J
        out[c] = min(wait, send)
    return out


# grid

def test_grid_origin_is_center_and_symmetric():
    g = Grid((0.2, 0.3), (61, 5))
    assert np.all(g.points()[g.origin_index] == 0)
    for i in range(2):
        c = g.axis_centers(i)
        assert np.array_equal(c, -c[::-1])
    assert np.allclose(g.lower, -g.upper)


def test_grid_rejects_even_or_small_counts():
    for counts in [(60, 61), (1, 3)]:
        with pytest.raises(GridError):
            Grid((0.2, 0.2), counts)


def test_reflect_index_maps_to_negative():
    g = Grid((0.2, 0.1), (7, 5))
    P = g.points()
    np.testing.assert_array_equal(P[g.reflect_index()], -P)


def test_nearest_clips_outside_box():
    g = Grid((0.2, 0.2), (5, 5))
    assert g.nearest(np.array([10.0, -10.0])) == np.ravel_multi_index((4, 0), (5, 5))


# stage cost

def test_stage_cost_examples(steady, paper):
    S = steady.Sigma
    assert stage_cost(np.zeros(2), 0, 0.2, A, S) == 0
    assert stage_cost(np.array([3.0, -1.0]), 1, 0.2, A, S) == pytest.approx(0.2)
    M = A.T @ S @ A
    assert stage_cost(np.array([0.1, 0.0]), 0, 0.2, A, S) == pytest.approx(0.01 * M[0, 0], rel=1e-14)
    assert stage_cost(np.array([0.1, 0.0]), 0, 0.2, A, S, "delay-free") == pytest.approx(0.01 * S[0, 0])
    with pytest.raises(ValueError):
        stage_cost(np.zeros(2), 0, 0.2, A, S, "other")


# transition density

def test_density_transmit_branch_ignores_e():
    y = np.array([0.01, -0.02])
    d1 = transition_density(y, np.array([0.1, 0.1]), 1, A, XI)
    d2 = transition_density(y, np.array([-0.5, 3.0]), 1, A, XI)
    assert d1 == d2


def test_density_mode_value():
    e = np.array([0.05, -0.02])
    val = transition_density(A @ e, e, 0, A, XI)
    assert val == pytest.approx(1 / (2 * np.pi * np.sqrt(np.linalg.det(XI))), rel=1e-12)


def test_density_integrates_to_one():
    sd = np.sqrt(np.diag(XI))
    e = np.array([0.02, 0.01])
    m = A @ e
    n = 401
    xs = [np.linspace(m[i] - 6 * sd[i], m[i] + 6 * sd[i], n) for i in range(2)]
    h = [x[1] - x[0] for x in xs]
    Y = np.stack(np.meshgrid(*xs, indexing="ij"), axis=-1).reshape(-1, 2)
    vals = np.array([transition_density(y, e, 0, A, XI) for y in Y]).reshape(n, n)
    total = np.trapezoid(np.trapezoid(vals, dx=h[1], axis=1), dx=h[0])
    assert total == pytest.approx(1.0, abs=1e-6)


def test_singular_xi_policy():
    with pytest.raises(SingularCovarianceError, match="smallest eigenvalue"):
        transition_density(np.zeros(2), np.zeros(2), 1, A, np.diag([1e-3, 0.0]), regularize=False)
    assert np.isfinite(transition_density(np.ones(2), np.zeros(2), 1, A, np.diag([1e-3, 0.0])))


# kernel

@pytest.mark.parametrize("force_dense", [False, True])
def test_kernel_rows(force_dense):
    g = Grid((0.05, 0.05), (11, 9))
    k = build_kernel(g, A, XI, force_dense=force_dense)
    np.testing.assert_array_equal(k.row(0, 1), k.transmit_row)
    np.testing.assert_allclose(k.transmit_row, k.row(g.origin_index, 0), atol=1e-15)
    for c in range(g.n_cells):
        r = k.row(c, 0)
        assert r.min() >= 0 and abs(r.sum() - 1) < 1e-9


def test_factored_and_dense_kernels_agree():
    g = Grid((0.05, 0.05), (11, 9))
    kf = build_kernel(g, A, XI)
    kd = build_kernel(g, A, XI, force_dense=True)
    assert kf.factored and not kd.factored
    v = np.random.default_rng(0).normal(size=g.n_cells)
    np.testing.assert_allclose(kf.expect_wait(v), kd.expect_wait(v), atol=1e-13)


def test_kernel_small_noise_concentrates():
    g = Grid((0.2, 0.2), (21, 21))
    sig2 = (0.01 * g.spacing[0]) ** 2
    A2 = np.array([[0.913, 0.207], [-0.111, 0.693]])  # keeps A e off cell edges
    k = build_kernel(g, A2, sig2 * np.eye(2))
    for c, e in enumerate(g.points()):
        assert k.row(c, 0)[g.nearest(A2 @ e)] >= 0.99


def test_correlated_xi_uses_dense_path():
    g = Grid((0.05, 0.05), (7, 7))
    Xi = np.array([[0.0015, 0.0005], [0.0005, 0.0011]])
    k = build_kernel(g, A, Xi)
    assert not k.factored
    c = 10
    np.testing.assert_allclose(k.row(c, 0), brute_force_rows(g, A, Xi, g.points()[c], 0), atol=1e-12)


def test_kernel_save_load_roundtrip(tmp_path):
    g = Grid((0.05, 0.05), (7, 5))
    for dense in (False, True):
        k = build_kernel(g, A, XI, force_dense=dense)
        p = tmp_path / f"k{dense}.npz"
        k.save(p)
        k2 = KernelCache.load(p)
        v = np.arange(g.n_cells, dtype=float)
        np.testing.assert_array_equal(k.expect_wait(v), k2.expect_wait(v))
        np.testing.assert_array_equal(k.transmit_row, k2.transmit_row)


def test_unclamped_rows_still_normalized():
    g = Grid((0.05, 0.05), (7, 7))
    k = build_kernel(g, A, XI, clamp=False)
    corner = 0
    assert abs(k.row(corner, 0).sum() - 1) < 1e-12


# Bellman backup

def test_backup_from_zero(M):
    g = Grid((0.2, 0.2), (9, 9))
    k = build_kernel(g, A, XI)
    c = StageCosts.quadratic(g, M, 0.2)
    J1, dec = bellman_backup(np.zeros(g.n_cells), k, c)
    np.testing.assert_allclose(J1.values, np.minimum(0.2, c.wait), rtol=1e-15)
    assert J1.values[g.origin_index] == 0
    assert np.all(dec[c.wait == 0.2] == 0)


def test_backup_matches_brute_force_3x3(M):
    g = Grid((0.03, 0.03), (3, 3))
    k = build_kernel(g, A, XI)
    J = np.random.default_rng(3).uniform(0, 0.2, g.n_cells)
    got = bellman_backup(J, k, StageCosts.quadratic(g, M, 0.2))[0].values
    np.testing.assert_allclose(got, brute_force_backup(J, g, A, XI, M, 0.2), atol=1e-12, rtol=0)


# value iteration

def test_zero_price_gives_zero_h(M):
    g = Grid((0.1, 0.1), (11, 11))
    sol = solve_mdp(g, A, XI, M, 0.0)
    assert np.all(sol.h.values == 0) and sol.Jstar == 0


def test_paper_value_function(paper_solution):
    h = paper_solution.h.values
    assert paper_solution.report.converged
    assert h[paper_solution.grid.origin_index] == 0
    assert h.min() >= -1e-9 and h.max() <= 0.2 + 1e-6
    Eh = paper_solution.kernel.expect_transmit(h)
    assert abs(paper_solution.Jstar - Eh) < 1e-6


def test_nonconvergence_is_reported(M, caplog):
    g = Grid((0.1, 0.1), (11, 11))
    k = build_kernel(g, A, XI)
    h, J, rep = value_iterate(g, k, StageCosts.quadratic(g, M, 0.2), tol=1e-9, max_iter=2)
    assert not rep.converged and rep.iterations == 2 and rep.span_residuals[-1] >= 1e-9
    assert "stopped after 2 sweeps" in caplog.text


def test_report_dict_fields(paper_solution):
    d = paper_solution.report.to_dict()
    assert d["converged"] and d["final_span"] < 1e-9
    assert 0 < d["contraction_factor"] < 1


# restrict

def test_restrict_full_box_is_identity(paper_solution):
    r = restrict(paper_solution.h, paper_solution.grid)
    np.testing.assert_array_equal(r.values, paper_solution.h.values)


def test_restrict_by_half_width(paper_solution):
    g = paper_solution.grid
    r = restrict(paper_solution.h, 10.5 * g.spacing)
    assert r.grid.counts == (21, 21) and r.values[r.grid.origin_index] == 0
    with pytest.raises(GridError):
        restrict(paper_solution.h, 10.2 * g.spacing)
    with pytest.raises(GridError):
        restrict(paper_solution.h, Grid((0.1, 0.1), (21, 21)))


def test_grid_for_theta_keeps_spacing(M):
    g = grid_for_theta(M, XI, 5.0, 0.4 / 61, 0.2)
    np.testing.assert_allclose(g.spacing, 0.4 / 61)
    assert np.all(g.upper >= np.sqrt(5.0 * np.diag(np.linalg.inv(M))))


# Bellman operator properties

SMALL = Grid((0.12, 0.1), (9, 7))


@pytest.fixture(scope="module")
def small_kernel():
    return build_kernel(SMALL, A, XI)


vec = st.lists(st.floats(-1, 1, allow_nan=False), min_size=SMALL.n_cells, max_size=SMALL.n_cells)


@settings(max_examples=50, deadline=None)
@given(a=vec, b=vec)
def test_backup_monotone(small_kernel, M, a, b):
    J = np.array(a)
    Jp = J + np.abs(np.array(b))
    c = StageCosts.quadratic(SMALL, M, 0.2)
    assert np.all(bellman_backup(J, small_kernel, c)[0].values
                  <= bellman_backup(Jp, small_kernel, c)[0].values + 1e-15)


@settings(max_examples=50, deadline=None)
@given(a=vec, shift=st.floats(-10, 10))
def test_backup_constant_shift(small_kernel, M, a, shift):
    J = np.array(a)
    c = StageCosts.quadratic(SMALL, M, 0.2)
    lhs = bellman_backup(J + shift, small_kernel, c)[0].values
    rhs = bellman_backup(J, small_kernel, c)[0].values + shift
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(a=vec, b=vec)
def test_backup_span_contraction(small_kernel, M, a, b):
    J, Jp = np.array(a), np.array(b)
    c = StageCosts.quadratic(SMALL, M, 0.2)
    d_in = span(J - Jp)
    d_out = span(bellman_backup(J, small_kernel, c)[0].values
                 - bellman_backup(Jp, small_kernel, c)[0].values)
    assert d_out <= d_in + 1e-12


@settings(max_examples=50, deadline=None)
@given(a=vec)
def test_backup_preserves_symmetry(small_kernel, M, a):
    J = np.array(a)
    J = J + J[SMALL.reflect_index()]
    out = bellman_backup(J, small_kernel, StageCosts.quadratic(SMALL, M, 0.2))[0].values
    assert np.max(np.abs(out - out[SMALL.reflect_index()])) <= 1e-12


def test_empirical_contraction_factor_below_one(small_kernel, M):
    rng = np.random.default_rng(11)
    c = StageCosts.quadratic(SMALL, M, 0.2)
    worst = 0.0
    for _ in range(200):
        J, Jp = rng.normal(size=(2, SMALL.n_cells))
        r = span(bellman_backup(J, small_kernel, c)[0].values
                 - bellman_backup(Jp, small_kernel, c)[0].values) / span(J - Jp)
        worst = max(worst, r)
    assert worst < 1


def test_value_function_validation():
    g = Grid((0.1,), (3,))
    with pytest.raises(GridError):
        ValueFunction(g, np.zeros(4))
    with pytest.raises(ValueError):
        ValueFunction(g, np.array([0.0, np.nan, 0.0]))
