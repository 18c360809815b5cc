"""Dense least-squares, ridge regression and LTI model fitting.

Parameter vectors follow the convention ``k = vec([A B]^T)``: the rows of
``[A B]`` are stacked one after another, so that for a state/input pair the
prediction of state component ``i`` is ``[x^T u^T] @ k[i*(n+m):(i+1)*(n+m)]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from .errors import DataError, InsufficientExcitation, RankDeficient

#: relative singular-value cutoff below which a regressor counts as rank deficient
RANK_TOL = 1e-10


@dataclass(frozen=True)
class Trajectory:
    """Time-indexed record of states ``x`` (T x n) and inputs ``u`` (T x m)."""

    x: np.ndarray
    u: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        if x.shape[0] == 1 and np.ndim(self.x) == 1:
            x = x.T
        u = np.asarray(self.u, dtype=float)
        if u.ndim == 1:
            u = u.reshape(-1, 1) if u.size else np.zeros((x.shape[0], 0))
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "u", u)
        if x.shape[0] < 2:
            raise DataError("a trajectory needs at least two samples")
        if u.shape[0] != x.shape[0]:
            raise DataError(f"x has {x.shape[0]} rows but u has {u.shape[0]}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
            raise DataError("trajectory contains non-finite entries")
        if not self.dt > 0:
            raise DataError("dt must be positive")

    @property
    def T(self) -> int:
        return self.x.shape[0]

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def m(self) -> int:
        return self.u.shape[1]

    def regressors(self) -> np.ndarray:
        """Rows ``[x_t^T u_t^T]`` for t = 0..T-2."""
        return np.hstack([self.x[:-1], self.u[:-1]])

    def targets(self) -> np.ndarray:
        """Next states ``x_{t+1}`` for t = 0..T-2."""
        return self.x[1:]

    def segment(self, start: int, stop: int) -> "Trajectory":
        """Sub-trajectory covering transitions ``start .. stop-1``."""
        return Trajectory(self.x[start:stop + 1], self.u[start:stop + 1], self.dt)


@dataclass(frozen=True)
class LTIModel:
    A: np.ndarray
    B: np.ndarray
    residual_sos: Optional[float] = None

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def params(self) -> np.ndarray:
        return matrices_to_params(self.A, self.B)

    def step(self, x, u):
        return self.A @ x + self.B @ u


@dataclass(frozen=True)
class LSSolution:
    coefficients: np.ndarray
    residual_sos: float
    param_covariance: Optional[np.ndarray] = field(default=None, repr=False)


def matrices_to_params(A, B) -> np.ndarray:
    """Return ``k = vec([A B]^T)``."""
    return np.hstack([np.atleast_2d(A), np.atleast_2d(B)]).ravel()


def params_to_matrices(k, n: int, m: int):
    """Inverse of :func:`matrices_to_params`."""
    AB = np.asarray(k, dtype=float).reshape(n, n + m)
    return AB[:, :n].copy(), AB[:, n:].copy()


def kron_regressor(x, u) -> np.ndarray:
    """Observation matrix ``I_n kron [x^T u^T]`` for a single time step."""
    phi = np.concatenate([np.ravel(x), np.ravel(u)])
    return np.kron(np.eye(np.size(x)), phi)


def _check_shapes(A, y):
    A = np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float)
    if A.ndim != 2:
        raise DataError("regressor matrix must be two-dimensional")
    if y.shape[0] != A.shape[0]:
        raise DataError(f"regressor has {A.shape[0]} rows, targets have {y.shape[0]}")
    return A, y


def _triangular_covariance(R, sigma2):
    Rinv = linalg.solve_triangular(R, np.eye(R.shape[0]))
    cov = sigma2 * (Rinv @ Rinv.T)
    return 0.5 * (cov + cov.T)


def solve_ls(regressors, targets, covariance: bool = False,
             sigma2: Optional[float] = None) -> LSSolution:
    """Ordinary least squares via a QR factorization of the regressor.

    Parameters
    ----------
    regressors : (N, K) array
    targets : (N,) or (N, p) array
    covariance : bool
        Also return ``sigma2 * (A'A)^-1`` (vector targets only).
    sigma2 : float, optional
        Noise variance; estimated as ``residual_sos / (N - K)`` when omitted.

    Raises
    ------
    RankDeficient
        If the smallest singular value is below ``1e-10`` times the largest.
    """
    A, y = _check_shapes(regressors, targets)
    N, K = A.shape
    if N < K:
        raise RankDeficient(f"{N} equations for {K} unknowns")
    Q, R = linalg.qr(A, mode="economic")
    s = linalg.svdvals(R)
    if K and (s[0] == 0 or s[-1] < RANK_TOL * s[0]):
        raise RankDeficient(
            f"smallest singular value {s[-1]:.3g} below tolerance (largest {s[0]:.3g})")
    coef = linalg.solve_triangular(R, Q.T @ y)
    resid = y - A @ coef
    sos = float(np.sum(resid ** 2))
    cov = None
    if covariance:
        if y.ndim != 1:
            raise DataError("parameter covariance needs a single target column")
        if sigma2 is None:
            sigma2 = sos / max(N - K, 1)
        cov = _triangular_covariance(R, sigma2)
    return LSSolution(coef, sos, cov)


def solve_ridge(regressors, targets, lam: float, covariance: bool = False,
                sigma2: Optional[float] = None) -> LSSolution:
    """Solve ``(A'A + lam I) k = A'y`` through QR of the stacked ``[A; sqrt(lam) I]``.

    ``residual_sos`` is the data misfit ``||y - A k||^2`` (penalty excluded).
    With ``covariance=True`` the returned matrix is ``sigma2 (A'A + lam I)^-1``.
    """
    if lam < 0:
        raise DataError("ridge parameter must be nonnegative")
    if lam == 0:
        return solve_ls(regressors, targets, covariance, sigma2)
    A, y = _check_shapes(regressors, targets)
    N, K = A.shape
    Aa = np.vstack([A, np.sqrt(lam) * np.eye(K)])
    ya = np.concatenate([y, np.zeros((K,) + y.shape[1:])])
    Q, R = linalg.qr(Aa, mode="economic")
    coef = linalg.solve_triangular(R, Q.T @ ya)
    sos = float(np.sum((y - A @ coef) ** 2))
    cov = None
    if covariance:
        if y.ndim != 1:
            raise DataError("parameter covariance needs a single target column")
        if sigma2 is None:
            sigma2 = sos / max(N - K, 1)
        cov = _triangular_covariance(R, sigma2)
    return LSSolution(coef, sos, cov)


def fit_lti(traj: Trajectory, ridge_lambda: float = 0.0) -> LTIModel:
    """Least-squares (optionally ridge) fit of ``x_{t+1} = A x_t + B u_t``.

    The Kronecker-structured problem decouples over state components, so it
    is solved as one multi-output regression on the rows ``[x_t^T u_t^T]``.
    """
    Phi = traj.regressors()
    Y = traj.targets()
    if ridge_lambda == 0:
        try:
            sol = solve_ls(Phi, Y)
        except RankDeficient as exc:
            raise InsufficientExcitation(
                "stacked [x u] regressor is rank deficient; pass ridge_lambda > 0") from exc
    else:
        sol = solve_ridge(Phi, Y, ridge_lambda)
    AB = sol.coefficients.T
    n = traj.n
    return LTIModel(AB[:, :n].copy(), AB[:, n:].copy(), sol.residual_sos)


def prediction_residuals(traj: Trajectory, A_seq, B_seq) -> np.ndarray:
    """One-step residuals ``x_{t+1} - A_t x_t - B_t u_t`` for time-varying matrices."""
    A_seq = np.asarray(A_seq)
    B_seq = np.asarray(B_seq)
    if A_seq.ndim == 2:
        A_seq = np.broadcast_to(A_seq, (traj.T - 1,) + A_seq.shape)
        B_seq = np.broadcast_to(B_seq, (traj.T - 1,) + B_seq.shape)
    pred = np.einsum("tij,tj->ti", A_seq, traj.x[:-1]) + np.einsum("tij,tj->ti", B_seq, traj.u[:-1])
    return traj.x[1:] - pred
