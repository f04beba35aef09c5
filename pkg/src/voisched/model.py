"""Plant, noise and cost description of the networked control loop plus the
offline matrix equations (control and filter Riccati, gains, Sigma, Xi)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

log = logging.getLogger(__name__)

PSD_TOL = 1e-10
PBH_TOL = 1e-9
RICCATI_TOL = 1e-12
RICCATI_MAX_ITER = 100_000
POLISH_ITER = 500


class ModelError(ValueError):
    """Raised for structurally invalid input (shape mismatch, bad values)."""


class SolverError(RuntimeError):
    """A fixed-point iteration did not converge."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class NotDiagonalizableError(ValueError):
    pass


def _mat(a, name: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(a, dtype=float))
    if arr.ndim != 2:
        raise ModelError(f"{name} must be a matrix, got ndim={arr.ndim}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SystemModel:
    """x+ = A x + B u + w,  y = C x + v,  w ~ N(0, W),  v ~ N(0, V).

    ``theta`` is the price of one transmission; ``x0_mean``/``x0_cov`` describe
    the initial state.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    W: np.ndarray
    V: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    theta: float = 0.0
    x0_mean: np.ndarray | None = None
    x0_cov: np.ndarray | None = None

    def __post_init__(self):
        for name in ("A", "B", "C", "W", "V", "Q", "R"):
            object.__setattr__(self, name, _mat(getattr(self, name), name))
        n = self.A.shape[0]
        x0m = np.zeros(n) if self.x0_mean is None else np.asarray(self.x0_mean, dtype=float).ravel()
        x0c = np.zeros((n, n)) if self.x0_cov is None else _mat(self.x0_cov, "x0_cov")
        x0m.setflags(write=False)
        object.__setattr__(self, "x0_mean", x0m)
        object.__setattr__(self, "x0_cov", x0c)
        object.__setattr__(self, "theta", float(self.theta))
        check_dimensions(self)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def with_theta(self, theta: float) -> "SystemModel":
        return replace(self, theta=theta)


def check_dimensions(m: SystemModel) -> None:
    """Raise ModelError naming the offending dimensions.

    R is exempt: a mismatching input weight is reported by ``validate_model``
    and repaired by ``conform_input_weight``.
    """
    n = m.A.shape[0]
    if m.A.shape != (n, n):
        raise ModelError(f"A must be square, got {m.A.shape}")
    if m.B.shape[0] != n:
        raise ModelError(f"B has {m.B.shape[0]} rows, A is {n}x{n}")
    if m.C.shape[1] != n:
        raise ModelError(f"C has {m.C.shape[1]} columns, A is {n}x{n}")
    p = m.C.shape[0]
    expect = {"W": (n, n), "V": (p, p), "Q": (n, n), "x0_cov": (n, n)}
    for name, shape in expect.items():
        got = getattr(m, name).shape
        if got != shape:
            raise ModelError(f"{name} must be {shape[0]}x{shape[1]} (n={n}, p={p}), got {got}")
    if m.R.shape[0] != m.R.shape[1]:
        raise ModelError(f"R must be square, got {m.R.shape}")
    if m.R.shape[0] < m.B.shape[1]:
        raise ModelError(f"R is {m.R.shape[0]}x{m.R.shape[1]} but B has m={m.B.shape[1]} columns")
    if m.x0_mean.shape != (n,):
        raise ModelError(f"x0_mean must have length n={n}, got {m.x0_mean.shape}")


@dataclass(frozen=True)
class Violation:
    assumption: str
    detail: str
    value: float

    def __str__(self):
        return f"{self.assumption}: {self.detail} ({self.value:.3e})"


def _psd_defect(M: np.ndarray) -> tuple[float, float]:
    asym = float(np.max(np.abs(M - M.T))) if M.size else 0.0
    min_eig = float(np.min(np.linalg.eigvalsh((M + M.T) / 2))) if M.size else 0.0
    return asym, min_eig


def sym_sqrt(M: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((M + M.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _pbh_min_sv(A: np.ndarray, other: np.ndarray, stack: str, unstable_only: bool = False) -> float:
    """Smallest normalized singular value of the PBH matrix over eigenvalues of A."""
    n = A.shape[0]
    worst = np.inf
    for lam in np.linalg.eigvals(A):
        if unstable_only and abs(lam) < 1.0:
            continue
        shifted = A - lam * np.eye(n)
        M = np.hstack([shifted, other]) if stack == "h" else np.vstack([shifted, other])
        sv = np.linalg.svd(M, compute_uv=False)
        scale = max(1.0, sv[0])
        worst = min(worst, sv[n - 1] / scale if len(sv) >= n else 0.0)
    return float(worst)


def validate_model(m: SystemModel) -> list[Violation]:
    """Check controllability, observability, detectability and the sign
    conditions on the covariances and weights. Empty list means all hold."""
    check_dimensions(m)
    out: list[Violation] = []
    if m.R.shape != (m.m, m.m):
        out.append(Violation("input_weight_shape",
                             f"R is {m.R.shape[0]}x{m.R.shape[1]} but B has m={m.m} column(s)",
                             float(m.R.shape[0] - m.m)))
    sv = _pbh_min_sv(m.A, m.B, "h")
    if sv <= PBH_TOL:
        out.append(Violation("controllable", "(A,B) PBH rank test fails, min singular value", sv))
    sv = _pbh_min_sv(m.A, m.C, "v")
    if sv <= PBH_TOL:
        out.append(Violation("observable", "(A,C) PBH rank test fails, min singular value", sv))
    sv = _pbh_min_sv(m.A, sym_sqrt(m.Q), "v", unstable_only=True)
    if sv <= PBH_TOL:
        out.append(Violation("detectable", "(A,Q^1/2) has an undetectable mode, min singular value", sv))
    for name in ("W", "V", "Q"):
        asym, min_eig = _psd_defect(getattr(m, name))
        if asym > PSD_TOL:
            out.append(Violation(f"{name}_symmetric", f"{name} asymmetry", asym))
        if min_eig < -PSD_TOL:
            out.append(Violation(f"{name}_psd", f"{name} has a negative eigenvalue", min_eig))
    R = m.R[: m.m, : m.m]
    asym, min_eig = _psd_defect(R)
    if asym > PSD_TOL:
        out.append(Violation("R_symmetric", "R asymmetry", asym))
    if min_eig <= 0.0:
        out.append(Violation("R_pd", "R is not positive definite, min eigenvalue", min_eig))
    if m.theta < 0:
        out.append(Violation("theta_nonnegative", "transmission price is negative", m.theta))
    return out


def conform_input_weight(m: SystemModel) -> SystemModel:
    """Return ``m`` with R cut to its leading m x m block when it is too large."""
    if m.R.shape == (m.m, m.m):
        return m
    log.warning("R is %dx%d but B has %d column(s); using the leading %dx%d block",
                m.R.shape[0], m.R.shape[1], m.m, m.m, m.m)
    return replace(m, R=m.R[: m.m, : m.m])


def _solve_ext(M: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Gauss-Jordan with partial pivoting; numpy.linalg has no long double path."""
    M = np.array(M, dtype=np.longdouble)
    X = np.array(X, dtype=np.longdouble)
    k = len(M)
    for j in range(k):
        piv = j + int(np.argmax(np.abs(M[j:, j])))
        if M[piv, j] == 0:
            raise np.linalg.LinAlgError("singular matrix")
        M[[j, piv]], X[[j, piv]] = M[[piv, j]], X[[piv, j]]
        X[j] /= M[j, j]
        M[j] /= M[j, j]
        f = M[:, j].copy()
        f[j] = 0
        M -= np.outer(f, M[j])
        X -= np.outer(f, X[j])
    return X


def _solve(M: np.ndarray, X: np.ndarray) -> np.ndarray:
    if M.dtype == np.longdouble or X.dtype == np.longdouble:
        try:
            return _solve_ext(M, X)
        except np.linalg.LinAlgError:
            pinv = np.linalg.pinv(np.asarray(M, dtype=float)).astype(np.longdouble)
            return pinv @ X
    try:
        return np.linalg.solve(M, X)
    except np.linalg.LinAlgError:
        return np.linalg.pinv(M) @ X


def control_riccati_map(S, A, B, Q, R):
    G = R + B.T @ S @ B
    return Q + A.T @ (S - S @ B @ _solve(G, B.T @ S)) @ A


def _ext(*mats):
    return [np.asarray(x, dtype=np.longdouble) for x in mats]


def control_riccati_residual(S, A, B, Q, R) -> float:
    """max |map(S) - S|, evaluated in extended precision so that cancellation
    inside the map does not mask the accuracy of S."""
    S, A, B, Q, R = _ext(S, A, B, Q, R)
    return float(np.max(np.abs(control_riccati_map(S, A, B, Q, R) - S)))


def _iterate(step, X, tol, max_iter):
    """Run X <- step(X) until successive iterates differ by less than tol(X)."""
    diff = np.inf
    for _ in range(max_iter):
        with np.errstate(over="ignore", invalid="ignore"):
            Xn = step(X)
            Xn = (Xn + Xn.T) / 2
            diff = float(np.max(np.abs(Xn - X)))
        X = Xn
        if not np.isfinite(diff) or diff < tol(X):
            break
    return X, diff


def _fixed_point(step, X0, what: str, tol=RICCATI_TOL, max_iter=RICCATI_MAX_ITER):
    def scaled(X):
        return tol * max(1.0, float(np.max(np.abs(X))))

    # absolute tol is below float64 resolution once entries reach ~1e4, so
    # converge relatively first and then polish in extended precision
    X, diff = _iterate(step, X0, scaled, max_iter)
    if not diff < scaled(X):
        raise SolverError(f"{what} did not converge in {max_iter} iterations", diff)
    floor = 16 * float(np.finfo(np.longdouble).eps)
    Xe, de = _iterate(step, X.astype(np.longdouble), lambda Y: max(tol, floor * scaled(Y) / tol),
                      POLISH_ITER)
    return Xe.astype(float) if np.isfinite(de) else X


def solve_control_riccati(m: SystemModel, tol=RICCATI_TOL, max_iter=RICCATI_MAX_ITER):
    """Iterate the control Riccati map from S=Q.

    Returns ``(S, L)`` with ``L = (R + B'SB)^-1 B'SA``; the control is
    ``u = -L x_hat``.
    """
    m = conform_input_weight(m)
    A, B, Q, R = m.A, m.B, m.Q, m.R
    S = _fixed_point(lambda S: control_riccati_map(S, A, B, Q, R), Q.copy(),
                     "control Riccati", tol, max_iter)
    L = _solve(R + B.T @ S @ B, B.T @ S @ A)
    return S, L


def filter_riccati_map(P, A, C, W, V):
    G = C @ P @ C.T + V
    return A @ (P - P @ C.T @ _solve(G, C @ P)) @ A.T + W


def filter_riccati_residual(P, A, C, W, V) -> float:
    P, A, C, W, V = _ext(P, A, C, W, V)
    return float(np.max(np.abs(filter_riccati_map(P, A, C, W, V) - P)))


def solve_filter_riccati(m: SystemModel, tol=RICCATI_TOL, max_iter=RICCATI_MAX_ITER):
    """Steady one-step-prediction covariance ``Ps`` and Kalman gain
    ``K = Ps C' (C Ps C' + V)^-1``."""
    A, C, W, V = m.A, m.C, m.W, m.V
    P = _fixed_point(lambda P: filter_riccati_map(P, A, C, W, V), W.copy(),
                     "filter Riccati", tol, max_iter)
    K = P @ C.T @ np.linalg.pinv(C @ P @ C.T + V)
    return P, K


def posterior_covariance(m: SystemModel, Ps: np.ndarray, K: np.ndarray) -> np.ndarray:
    """cov[x_k - x_hat_k] after the measurement update, (I - K C) Ps."""
    P = (np.eye(m.n) - K @ m.C) @ Ps
    return (P + P.T) / 2


def compute_sigma(m: SystemModel, S: np.ndarray) -> np.ndarray:
    """Cost-of-information matrix A'SB (R + B'SB)^-1 B'SA = L'(R + B'SB)L.

    The mismatch penalty is e'A' Sigma A e: the controller acts on the remote
    estimate one step late, so the extra A factors are intended.
    """
    m = conform_input_weight(m)
    A, B, R = m.A, m.B, m.R
    Sig = A.T @ S @ B @ _solve(R + B.T @ S @ B, B.T @ S @ A)
    return (Sig + Sig.T) / 2


def compute_xi_cov(m: SystemModel, Pf: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Covariance of the aggregate noise K(C(A Pf A' + W)C' + V)K'.

    ``Pf`` is the filtered error covariance cov[x_k - x_hat^s_k]; with it,
    C(A Pf A' + W)C' + V is the innovation covariance.
    """
    A, C, W, V = m.A, m.C, m.W, m.V
    X = K @ (C @ (A @ Pf @ A.T + W) @ C.T + V) @ K.T
    return (X + X.T) / 2


@dataclass(frozen=True)
class SteadyState:
    S: np.ndarray
    L: np.ndarray
    Ps: np.ndarray
    K: np.ndarray
    Sigma: np.ndarray
    Xi: np.ndarray
    Ps_post: np.ndarray
    residuals: dict = field(default_factory=dict)

    def cost_matrix(self, A: np.ndarray, variant: str = "one-step-delay") -> np.ndarray:
        """Matrix M of the waiting cost e'Me."""
        if variant == "one-step-delay":
            M = A.T @ self.Sigma @ A
        elif variant == "delay-free":
            M = self.Sigma
        else:
            raise ValueError(f"unknown cost variant {variant!r}")
        return (M + M.T) / 2


def solve_steady_state(m: SystemModel) -> SteadyState:
    m = conform_input_weight(m)
    S, L = solve_control_riccati(m)
    Ps, K = solve_filter_riccati(m)
    Pf = posterior_covariance(m, Ps, K)
    Sig = compute_sigma(m, S)
    Xi = compute_xi_cov(m, Pf, K)
    res = {
        "control_riccati": control_riccati_residual(S, m.A, m.B, m.Q, m.R),
        "filter_riccati": filter_riccati_residual(Ps, m.A, m.C, m.W, m.V),
        "sigma_min_eig": float(np.min(np.linalg.eigvalsh(Sig))),
        "xi_min_eig": float(np.min(np.linalg.eigvalsh(Xi))),
    }
    return SteadyState(S=S, L=L, Ps=Ps, K=K, Sigma=Sig, Xi=Xi, Ps_post=Pf, residuals=res)


@dataclass(frozen=True)
class DiagonalizedModel:
    U: np.ndarray
    Lambda: np.ndarray
    UInv: np.ndarray
    zeta_cov: np.ndarray | None = None

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.diag(self.Lambda)

    def is_signed_permutation(self, tol: float = 1e-12) -> bool:
        """True when the s-coordinates are the e-coordinates up to order and sign."""
        U = np.abs(self.U)
        return bool(np.all((U < tol) | (np.abs(U - 1) < tol)) and np.allclose(U.sum(0), 1))


def diagonalize(A, Xi=None, tol: float = 1e-8) -> DiagonalizedModel:
    """Real eigendecomposition A = U Lambda U^-1, eigenvalues in descending order.

    Columns of U have unit norm and their largest entry positive.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ModelError(f"A must be square, got {A.shape}")
    vals, vecs = np.linalg.eig(A)
    if np.max(np.abs(np.imag(vals)), initial=0.0) > 1e-10:
        raise NotDiagonalizableError("A is not real-diagonalizable: complex eigenvalues")
    vals = np.real(vals)
    vecs = np.real(vecs)
    order = np.argsort(-vals, kind="stable")
    vals, U = vals[order], vecs[:, order]
    U = U / np.linalg.norm(U, axis=0)
    piv = np.argmax(np.abs(U), axis=0)
    U = U * np.sign(U[piv, np.arange(U.shape[1])])
    if np.linalg.cond(U) > 1e10:
        raise NotDiagonalizableError("A is not real-diagonalizable: defective eigenstructure")
    UInv = np.linalg.inv(U)
    Lam = np.diag(vals)
    if np.max(np.abs(U @ Lam @ UInv - A)) >= tol:
        raise NotDiagonalizableError("eigendecomposition does not reconstruct A")
    zc = None
    if Xi is not None:
        zc = UInv @ np.asarray(Xi, dtype=float) @ UInv.T
        zc = (zc + zc.T) / 2
    return DiagonalizedModel(U=U, Lambda=Lam, UInv=UInv, zeta_cov=zc)


def paper_system(theta: float = 0.2, diagonal_input: bool = True) -> SystemModel:
    """Two-axis example plant: A = diag(1.3, -1.1), C = I, W = V = 1e-3 I, Q = R = I.

    ``diagonal_input=True`` uses B = 0.1 I (the input matrix that reproduces
    the reported gain diag(5.4154, -2.2606)); ``False`` uses the single input
    column B = [0.1, 0.1]', for which R is cut to its leading entry.
    """
    B = 0.1 * np.eye(2) if diagonal_input else np.array([[0.1], [0.1]])
    return SystemModel(
        A=np.diag([1.3, -1.1]), B=B, C=np.eye(2),
        W=1e-3 * np.eye(2), V=1e-3 * np.eye(2),
        Q=np.eye(2), R=np.eye(2), theta=theta,
        x0_mean=np.zeros(2), x0_cov=np.zeros((2, 2)),
    )
