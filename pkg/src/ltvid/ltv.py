"""Identification of linear time-varying models ``x_{t+1} = A_t x_t + B_t u_t``.

Smooth parameter evolutions are estimated with a Kalman smoother on the
parameter state, sparse evolutions with linearized ADMM, and piecewise
constant evolutions with a known number of switches by dynamic programming.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, sparse
from scipy.sparse import linalg as splinalg

from .errors import DataError, IllPosed, InfeasibleSegmentation
from .estimation import LinearGaussianModel, kalman_filter, rts_smooth, LOG_2PI
from .numeric import LTIModel, Trajectory, fit_lti, params_to_matrices, prediction_residuals
from .prox import (GROUP_L2, L1, ADMMOptions, BlockDiagonal, ProxProblem, difference_nullspace,
                   difference_operator, linearized_admm, polish_differences)

#: relative singular-value threshold of the identifiability check
IDENT_TOL = 1e-8
#: initial parameter-state covariance scale of the smoother
P0_SCALE = 1e4


@dataclass
class LTVModel:
    """Sequence of ``T' = T - 1`` dynamics matrices and optional parameter covariances."""

    A_seq: np.ndarray
    B_seq: np.ndarray
    param_covs: Optional[np.ndarray] = field(default=None, repr=False)
    method: str = ""
    lam: Optional[float] = None
    info: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.A_seq = np.asarray(self.A_seq, dtype=float)
        self.B_seq = np.asarray(self.B_seq, dtype=float)
        if self.A_seq.shape[0] != self.B_seq.shape[0]:
            raise DataError("A_seq and B_seq lengths differ")

    @property
    def T(self) -> int:
        return self.A_seq.shape[0]

    @property
    def n(self) -> int:
        return self.A_seq.shape[1]

    @property
    def m(self) -> int:
        return self.B_seq.shape[2]

    @property
    def params(self) -> np.ndarray:
        """Parameter vectors ``k_t`` as rows (T' x K)."""
        return np.concatenate([self.A_seq, self.B_seq], axis=2).reshape(self.T, -1)

    @classmethod
    def from_params(cls, k, n: int, m: int, **kw) -> "LTVModel":
        AB = np.asarray(k, dtype=float).reshape(-1, n, n + m)
        return cls(AB[:, :, :n].copy(), AB[:, :, n:].copy(), **kw)

    def step_norms(self, order: int = 1) -> np.ndarray:
        """``||D_order k||_2`` per time step."""
        return np.linalg.norm(np.diff(self.params, n=order, axis=0), axis=1)

    def prediction_errors(self, traj: Trajectory) -> np.ndarray:
        return prediction_residuals(traj, self.A_seq, self.B_seq)


@dataclass(frozen=True)
class ParameterEvolution:
    """Monic polynomial ``P(z)`` (highest power first) driving ``P(z) k_t = w_t``.

    ``(1, -1)`` is the random walk, ``(1, -2, 1)`` the second-order
    (constant-slope) evolution.
    """

    poly: tuple = (1.0, -1.0)

    def __post_init__(self):
        p = tuple(float(c) for c in self.poly)
        if len(p) < 2:
            raise DataError("evolution polynomial must have degree >= 1")
        if p[0] != 1.0:
            raise DataError("evolution polynomial must be monic")
        object.__setattr__(self, "poly", p)

    @classmethod
    def identity(cls):
        return cls((1.0, -1.0))

    @classmethod
    def second_order(cls):
        return cls((1.0, -2.0, 1.0))

    @classmethod
    def polynomial(cls, coeffs):
        return cls(tuple(coeffs))

    @property
    def order(self) -> int:
        return len(self.poly) - 1

    def companion(self, K: int) -> np.ndarray:
        """Transition of the stacked state ``[k_t, ..., k_{t+d-1}]``."""
        d = self.order
        F = np.zeros((d * K, d * K))
        for i in range(d - 1):
            F[i * K:(i + 1) * K, (i + 1) * K:(i + 2) * K] = np.eye(K)
        for i in range(d):
            F[(d - 1) * K:, i * K:(i + 1) * K] = -self.poly[d - i] * np.eye(K)
        return F

    def difference_matrix(self, T: int, K: int = 1) -> sparse.csr_matrix:
        """Rows ``P(z) k_t`` for t = 0..T-1-d, acting on stacked ``k`` (T*K)."""
        d = self.order
        rows = T - d
        if rows <= 0:
            return sparse.csr_matrix((0, T * K))
        diags = [np.full(rows, self.poly[d - j]) for j in range(d + 1)]
        D = sparse.diags(diags, list(range(d + 1)), shape=(rows, T))
        return sparse.kron(D, sparse.identity(K), format="csr")


@dataclass
class Identifiability:
    well_posed: bool
    min_singular_value: float
    max_singular_value: float


def check_identifiability(traj: Trajectory, order: int = 1) -> Identifiability:
    """Rank test of the stacked regressor rows ``[x_t' u_t']``.

    For first-order evolutions the LTV problem is well posed exactly when the
    LTI problem is. For higher orders the condition is that no nonzero ``v``
    annihilates every ``phi_t phi_t'``, which is the same full-column-rank
    condition on the stacked rows, so ``order`` does not change the test.
    """
    if order < 1:
        raise DataError("order must be >= 1")
    Phi = traj.regressors()
    s = linalg.svdvals(Phi)
    smax = float(s[0])
    smin = float(s[-1]) if Phi.shape[0] >= Phi.shape[1] else 0.0
    return Identifiability(bool(smax > 0 and smin > IDENT_TOL * smax), smin, smax)


def kron_blocks(traj: Trajectory) -> np.ndarray:
    """Per-step observation matrices ``I_n kron [x_t' u_t']`` stacked as (T', n, K)."""
    Phi = traj.regressors()
    Tp, p = Phi.shape
    n = traj.n
    C = np.zeros((Tp, n, n, p))
    for i in range(n):
        C[:, i, i, :] = Phi
    return C.reshape(Tp, n, n * p)


# ---------------------------------------------------------------------------
# smooth evolutions via Kalman smoothing


def _state_space(traj, lam, evolution, step_weight, P0_scale, x0=None):
    n, m = traj.n, traj.m
    K = n * (n + m)
    d = evolution.order
    C = kron_blocks(traj)
    Tp = C.shape[0]
    Cfull = np.zeros((Tp, n, d * K))
    Cfull[:, :, :K] = C
    R1 = np.zeros((d * K, d * K))
    if step_weight is None:
        R1[(d - 1) * K:, (d - 1) * K:] = np.eye(K) / lam ** 2
    else:
        W = np.atleast_2d(np.asarray(step_weight, dtype=float))
        if W.shape != (K, K):
            raise DataError(f"step_weight must be {K}x{K}")
        try:
            Winv = linalg.cho_solve(linalg.cho_factor(W), np.eye(K))
        except linalg.LinAlgError as err:
            raise IllPosed("step_weight must be positive definite") from err
        R1[(d - 1) * K:, (d - 1) * K:] = 0.5 * (Winv + Winv.T) / lam ** 2
    x0 = np.zeros(d * K) if x0 is None else x0
    model = LinearGaussianModel(A=evolution.companion(K), C=Cfull, R1=R1, R2=np.eye(n),
                                x0=x0, P0=P0_scale * np.eye(d * K))
    return model, traj.targets()


def _validate_l2(traj, lam, evolution):
    if not lam > 0:
        raise IllPosed("lambda must be positive")
    diag = check_identifiability(traj, evolution.order)
    if not diag.well_posed:
        raise IllPosed(
            "stacked [x u] regressor is rank deficient (min singular value "
            f"{diag.min_singular_value:.3g}); the LTV problem has no unique minimizer")


def _profiled_loglik(seq, n_obs):
    maha = 0.0
    logdet = 0.0
    for e, S in zip(seq.innovations, seq.innovation_covs):
        if e is None:
            continue
        L = linalg.cholesky(S, lower=True)
        a = linalg.solve_triangular(L, e, lower=True)
        maha += a @ a
        logdet += 2 * np.sum(np.log(np.diag(L)))
    sigma2 = maha / n_obs
    return -0.5 * (n_obs * np.log(sigma2) + logdet + n_obs + n_obs * LOG_2PI), sigma2


def fit_l2(traj: Trajectory, lam: float, evolution: Optional[ParameterEvolution] = None,
           prior=None, step_weight=None, P0_scale: float = P0_SCALE,
           max_passes: int = 10) -> LTVModel:
    """Minimize ``||y - yhat||^2 + lam^2 sum_t ||P(z) k_t||^2`` by Kalman smoothing.

    The parameter state uses ``R2 = I`` and process noise ``lam^-2 I`` (or
    ``lam^-2 step_weight^-1``) on the driven companion block. The initial
    state has covariance ``P0_scale * I``; its mean is re-centred on the
    previous smoothed estimate until it stops moving, which removes the
    initial-state bias so the result is the exact minimizer.

    Parameters
    ----------
    prior : callable(t) -> (mu0, Sigma0) or None, optional
        Gaussian prior on ``k_t`` fused at step ``t``; ``None`` (or
        ``Sigma0=None``) skips the step.
    step_weight : (K, K) array, optional
        Positive definite weight in ``(P(z)k)' W (P(z)k)``.

    Returns
    -------
    LTVModel
        ``param_covs`` are the smoothed marginal covariances of ``k_t``
        scaled by the estimated noise variance.
    """
    evolution = evolution or ParameterEvolution.identity()
    _validate_l2(traj, lam, evolution)
    n, m = traj.n, traj.m
    K = n * (n + m)
    model, Y = _state_space(traj, lam, evolution, step_weight, P0_scale)
    x0 = model.x0
    passes = 0
    for passes in range(1, max_passes + 1):
        model.x0 = x0
        seq = rts_smooth(kalman_filter(model, Y, prior=prior), model)
        new_x0 = seq.smoothed_means[0]
        moved = np.linalg.norm(new_x0 - x0)
        x0 = new_x0
        if moved <= 1e-13 * max(1.0, np.linalg.norm(new_x0)):
            break
    k = seq.smoothed_means[:, :K]
    resid = Y - np.einsum("tik,tk->ti", kron_blocks(traj), k)
    n_obs = resid.size
    sigma2 = float(np.sum(resid ** 2) / n_obs)
    covs = sigma2 * seq.smoothed_covs[:, :K, :K]
    out = LTVModel.from_params(k, n, m, param_covs=covs, method=f"l2_order{evolution.order}",
                               lam=float(lam))
    out.info.update(sigma2=sigma2, passes=passes, residual_sos=float(np.sum(resid ** 2)))
    return out


def l2_loglik(traj: Trajectory, lam: float, evolution: Optional[ParameterEvolution] = None,
              step_weight=None, P0_scale: float = P0_SCALE) -> float:
    """Profile log-likelihood of the data under the random-walk parameter model.

    The noise variance ``sigma^2`` (``R2 = sigma^2 I``, ``R1 = sigma^2
    lam^-2 I``) is replaced by its maximum-likelihood value computed from the
    forward-pass innovations.
    """
    evolution = evolution or ParameterEvolution.identity()
    _validate_l2(traj, lam, evolution)
    model, Y = _state_space(traj, lam, evolution, step_weight, P0_scale)
    seq = kalman_filter(model, Y)
    return float(_profiled_loglik(seq, Y.size)[0])


def select_lambda_ml(traj: Trajectory, lambda_grid: Sequence[float],
                     evolution: Optional[ParameterEvolution] = None):
    """Return ``(best_lambda, logliks)`` maximizing :func:`l2_loglik` over the grid."""
    grid = [float(v) for v in lambda_grid]
    if not grid:
        raise DataError("lambda grid is empty")
    if any(not v > 0 for v in grid):
        raise DataError("all lambda values must be positive")
    ll = np.array([l2_loglik(traj, v, evolution) for v in grid])
    return grid[int(np.argmax(ll))], ll


def dense_l2_solution(traj: Trajectory, lam: float,
                      evolution: Optional[ParameterEvolution] = None) -> np.ndarray:
    """``(A'A + lam^2 D'D)^-1 A'y`` assembled explicitly (small problems only)."""
    evolution = evolution or ParameterEvolution.identity()
    C = kron_blocks(traj)
    Tp, n, K = C.shape
    A = linalg.block_diag(*C)
    D = evolution.difference_matrix(Tp, K).toarray()
    H = A.T @ A + lam ** 2 * D.T @ D
    k = linalg.solve(H, A.T @ traj.targets().ravel(), assume_a="pos")
    return k.reshape(Tp, K)


# ---------------------------------------------------------------------------
# sparse evolutions via ADMM

GROUP = "group"
ELEMENTWISE = "l1"


def _sparse_problem(traj, lam, order, penalty):
    if order not in (1, 2):
        raise DataError("order must be 1 or 2")
    if penalty not in (GROUP, ELEMENTWISE):
        raise DataError(f"unknown penalty {penalty!r}")
    C = kron_blocks(traj)
    Tp, n, K = C.shape
    if Tp < order + 1:
        raise DataError(f"need at least {order + 2} samples")
    D = difference_operator(Tp, order, block=K)
    pen = GROUP_L2 if penalty == GROUP else L1
    problem = ProxProblem(BlockDiagonal(C), traj.targets().ravel(), pen, D, lam / 2.0,
                          K if pen == GROUP_L2 else None)
    return problem, Tp, K


def fit_sparse(traj: Trajectory, lam: float, order: int = 1, penalty: str = GROUP,
               opts: Optional[ADMMOptions] = None) -> LTVModel:
    """Minimize ``||y - yhat||^2 + lam * sum_t ||D_order k||`` by linearized ADMM.

    ``penalty="group"`` uses the 2-norm of each time step's parameter change
    (changes happen to all coefficients at once); ``penalty="l1"`` uses the
    elementwise 1-norm. The ADMM estimate is polished on its recovered
    sparsity pattern so that inactive steps are exactly zero.
    """
    if not lam > 0:
        raise IllPosed("lambda must be positive")
    problem, Tp, K = _sparse_problem(traj, lam, order, penalty)
    report = linearized_admm(problem, opts)
    k = polish_differences(report, problem, None, Tp, order, K)
    out = LTVModel.from_params(k.reshape(Tp, K), traj.n, traj.m,
                               method=f"{penalty}_order{order}", lam=float(lam))
    out.info.update(converged=report.converged, iterations=report.iterations,
                    objective=problem.objective(k))
    return out


def sparse_lambda_max(traj: Trajectory, order: int = 1, penalty: str = GROUP) -> float:
    """Smallest ``lam`` for which :func:`fit_sparse` returns a parameter
    sequence whose ``order``-th differences all vanish."""
    problem, Tp, K = _sparse_problem(traj, 1.0, order, penalty)
    A = problem.regressors
    N = difference_nullspace(Tp, order, K)
    AN = np.vstack([A.matvec(N[:, j]) for j in range(N.shape[1])]).T
    c = np.linalg.lstsq(AN, problem.targets, rcond=None)[0]
    g = A.rmatvec(problem.targets - A.matvec(N @ c))
    D = problem.linear_op
    s = splinalg.spsolve((D @ D.T).tocsc(), D @ g)
    s = s.reshape(-1, K)
    lam_half = np.max(np.linalg.norm(s, axis=1)) if penalty == GROUP else np.max(np.abs(s))
    return 2.0 * float(lam_half)


#: fraction of :func:`sparse_lambda_max` used when lambda is chosen automatically
AUTO_SPARSE_FRACTION = 0.25


# ---------------------------------------------------------------------------
# segmentation


@dataclass
class SegmentedModel:
    """Piecewise constant LTI models; ``breakpoints[i]`` is the first
    transition index governed by ``segment_models[i + 1]``."""

    breakpoints: list
    segment_models: list
    total_cost: float
    n_steps: int = 0

    def __post_init__(self):
        bps = list(self.breakpoints)
        if any(b2 <= b1 for b1, b2 in zip(bps, bps[1:])):
            raise DataError("breakpoints must be strictly increasing")
        if len(self.segment_models) != len(bps) + 1:
            raise DataError("need one more segment model than breakpoints")

    def bounds(self):
        edges = [0] + list(self.breakpoints) + [self.n_steps]
        return list(zip(edges[:-1], edges[1:]))

    def to_ltv(self) -> LTVModel:
        A, B = [], []
        for (a, b), mdl in zip(self.bounds(), self.segment_models):
            A += [mdl.A] * (b - a)
            B += [mdl.B] * (b - a)
        return LTVModel(np.array(A), np.array(B), method="segmented")


class SegmentCosts:
    """Residual sums of squares of ridge LTI fits on every transition window.

    ``cost(i, j)`` covers transitions ``i .. j-1``; computed from cumulative
    Gram matrices, so every window costs one small solve.
    """

    def __init__(self, traj: Trajectory, ridge_lambda: float = 1e-8):
        Phi = traj.regressors()
        Y = traj.targets()
        self.T, self.p = Phi.shape
        self.n = traj.n
        self.ridge = float(ridge_lambda)
        z = np.zeros((1,))
        self.G = np.concatenate([np.zeros((1, self.p, self.p)),
                                 np.cumsum(np.einsum("ti,tj->tij", Phi, Phi), axis=0)])
        self.H = np.concatenate([np.zeros((1, self.p, self.n)),
                                 np.cumsum(np.einsum("ti,tj->tij", Phi, Y), axis=0)])
        self.S = np.concatenate([z, np.cumsum(np.sum(Y ** 2, axis=1))])

    def solve(self, i: int, j: int) -> np.ndarray:
        """Ridge coefficients ``W`` (p x n) with ``x_{t+1} ~ W' phi_t`` on the window."""
        G = self.G[j] - self.G[i] + self.ridge * np.eye(self.p)
        H = self.H[j] - self.H[i]
        return linalg.solve(G, H, assume_a="sym")

    def row(self, i: int, j_lo: int) -> np.ndarray:
        """Costs ``cost(i, j)`` for j = j_lo..T (vectorized)."""
        js = np.arange(j_lo, self.T + 1)
        G = self.G[js] - self.G[i] + self.ridge * np.eye(self.p)
        H = self.H[js] - self.H[i]
        W = np.linalg.solve(G, H)
        # ||Y - Phi W||^2 = S - 2 tr(W'H) + tr(W' Graw W)
        Graw = self.G[js] - self.G[i]
        c = (self.S[js] - self.S[i] - 2 * np.einsum("kpn,kpn->k", W, H)
             + np.einsum("kpn,kpq,kqn->k", W, Graw, W))
        return np.maximum(c, 0.0)

    def matrix(self, min_length: int) -> np.ndarray:
        C = np.full((self.T + 1, self.T + 1), np.inf)
        for i in range(self.T - min_length + 1):
            C[i, i + min_length:] = self.row(i, i + min_length)
        return C


def _segment_model(costs: SegmentCosts, i, j):
    W = costs.solve(i, j)
    AB = W.T
    n = costs.n
    return LTIModel(AB[:, :n].copy(), AB[:, n:].copy())


TIE_RTOL = 1e-12


def fit_segments_dp(traj: Trajectory, M: int, ridge_lambda: float = 1e-8,
                    min_length: Optional[int] = None) -> SegmentedModel:
    """Globally optimal split of the transitions into ``M + 1`` LTI segments.

    Bellman recursion over the next breakpoint; costs within
    ``TIE_RTOL * sum ||x_{t+1}||^2`` of the minimum are ties, and among tied
    solutions the earliest breakpoints win.
    Cost is O(T^2 M) window lookups after O(T^2 K^3) window fits.

    Parameters
    ----------
    M : int
        Number of breakpoints (M >= 1).
    ridge_lambda : float
        Ridge weight of every window fit; the cost is the data misfit only.
    min_length : int, optional
        Shortest admissible segment (transitions); default 1 with a ridge,
        ``n + m`` without.

    Raises
    ------
    InfeasibleSegmentation
        If ``M + 1`` segments of ``min_length`` do not fit in the data.
    """
    if M < 1:
        raise DataError("M must be at least 1")
    if ridge_lambda < 0:
        raise DataError("ridge_lambda must be nonnegative")
    costs = SegmentCosts(traj, ridge_lambda)
    T, p = costs.T, costs.p
    if min_length is None:
        min_length = 1 if ridge_lambda > 0 else p
    if (M + 1) * min_length > T:
        raise InfeasibleSegmentation(
            f"{M + 1} segments of length >= {min_length} need {(M + 1) * min_length} "
            f"transitions, have {T}")
    C = costs.matrix(min_length)
    # costs closer than rounding noise of the data energy count as ties
    tie_tol = TIE_RTOL * max(float(costs.S[-1]), 1.0)
    # F[i] = best cost of covering i..T-1 with the remaining segments
    F = C[:, T].copy()
    back = []
    for _ in range(M):
        Fn = np.full(T + 1, np.inf)
        ptr = np.zeros(T + 1, dtype=int)
        for i in range(T):
            vals = C[i, i + 1:T] + F[i + 1:T]
            if vals.size == 0:
                continue
            j = int(np.argmax(vals <= vals.min() + tie_tol))
            Fn[i] = vals[j]
            ptr[i] = i + 1 + j
        back.append(ptr)
        F = Fn
    if not np.isfinite(F[0]):
        raise InfeasibleSegmentation("no feasible segmentation")
    bps = []
    i = 0
    for ptr in reversed(back):
        i = int(ptr[i])
        bps.append(i)
    edges = [0] + bps + [T]
    models = [_segment_model(costs, a, b) for a, b in zip(edges[:-1], edges[1:])]
    total = float(sum(C[a, b] for a, b in zip(edges[:-1], edges[1:])))
    return SegmentedModel(bps, models, total, T)


def detect_knots(model: LTVModel, order: int = 1, count: Optional[int] = None,
                 threshold: Optional[float] = None) -> list:
    """Time indices where ``a_t = ||D_order k_t||_2`` is large.

    The index reported for ``a_t`` is ``t + 1``: the first step of the new
    segment for first differences, the kink for second differences.
    Exactly one of ``count`` (largest entries) or ``threshold`` must be given.
    """
    if (count is None) == (threshold is None):
        raise DataError("give exactly one of count or threshold")
    if model.T < order + 1:
        raise DataError("model too short for the requested order")
    a = model.step_norms(order)
    if count is not None:
        idx = np.argsort(-a, kind="stable")[:count]
    else:
        idx = np.flatnonzero(a > threshold)
    return sorted(int(i) + 1 for i in idx)


def refine_two_step(traj: Trajectory, knots, ridge_lambda: float = 0.0) -> SegmentedModel:
    """Independent LTI fit between consecutive knots."""
    T = traj.T - 1
    knots = sorted(int(k) for k in knots)
    edges = [0] + knots + [T]
    if any(b <= a for a, b in zip(edges[:-1], edges[1:])):
        raise InfeasibleSegmentation("knots must lie strictly inside (0, T-1) and be distinct")
    models = []
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        seg = Trajectory(traj.x[a:b + 1], traj.u[a:b + 1], traj.dt)
        try:
            mdl = fit_lti(seg, ridge_lambda)
        except DataError as exc:
            raise InfeasibleSegmentation(f"segment [{a}, {b}) cannot be fitted: {exc}") from exc
        models.append(mdl)
        total += mdl.residual_sos
    return SegmentedModel(knots, models, float(total), T)
