"""LQR, box-constrained iLQR with a KL limit, Gaussian exploration policies and a model-based RL loop.

Time convention: controls ``u_0..u_{T-1}``, states ``x_0..x_T``. The stage
cost is ``1/2 s' H_t s + g_t' s`` with ``s = [x; u]`` and the terminal cost
is ``1/2 x' Hf x + gf' x``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import linalg

from .errors import DataError, LineSearchFailed, NonPDQuu, SingularCovariance
from .numeric import Trajectory, fit_lti

MU_MIN, MU_FACTOR, MU_MAX = 1e-6, 10.0, 1e6


# ---------------------------------------------------------------------------
# costs


@dataclass
class QuadraticCost:
    """Per-step quadratic stage cost in ``s = [x; u]`` plus a terminal cost."""

    H: np.ndarray  # (T, n+m, n+m)
    g: np.ndarray  # (T, n+m)
    Hf: np.ndarray  # (n, n)
    gf: np.ndarray  # (n,)
    n: int

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.g = np.asarray(self.g, dtype=float)
        self.Hf = np.asarray(self.Hf, dtype=float)
        self.gf = np.asarray(self.gf, dtype=float)
        if self.H.ndim != 3 or self.H.shape[1] != self.H.shape[2]:
            raise DataError("H must have shape (T, n+m, n+m)")
        if not np.allclose(self.H, np.swapaxes(self.H, 1, 2)):
            raise DataError("stage Hessians must be symmetric")

    @property
    def T(self) -> int:
        return self.H.shape[0]

    @property
    def m(self) -> int:
        return self.H.shape[1] - self.n

    @classmethod
    def tracking(cls, Q, R, T: int, x_ref=None, u_ref=None, Qf=None) -> "QuadraticCost":
        """``1/2 (x - x_ref)' Q (x - x_ref) + 1/2 (u - u_ref)' R (u - u_ref)`` (constants dropped)."""
        Q, R = np.atleast_2d(Q).astype(float), np.atleast_2d(R).astype(float)
        n, m = Q.shape[0], R.shape[0]
        x_ref = np.broadcast_to(np.zeros(n) if x_ref is None else np.asarray(x_ref, float), (T + 1, n))
        u_ref = np.broadcast_to(np.zeros(m) if u_ref is None else np.asarray(u_ref, float), (T, m))
        H = np.zeros((T, n + m, n + m))
        H[:, :n, :n] = Q
        H[:, n:, n:] = R
        g = np.hstack([-x_ref[:T] @ Q, -u_ref @ R])
        Qf = np.zeros((n, n)) if Qf is None else np.atleast_2d(Qf).astype(float)
        return cls(H, g, Qf, -Qf @ x_ref[T], n)

    def stage(self, t: int, x, u) -> float:
        s = np.concatenate([x, u])
        return float(0.5 * s @ self.H[t] @ s + self.g[t] @ s)

    def terminal(self, x) -> float:
        return float(0.5 * x @ self.Hf @ x + self.gf @ x)

    def total(self, X, U) -> float:
        S = np.hstack([X[:-1], U])
        stage = 0.5 * np.einsum("ti,tij,tj->", S, self.H, S) + np.sum(self.g * S)
        return float(stage + self.terminal(X[-1]))

    def add(self, dH, dg) -> "QuadraticCost":
        return replace(self, H=self.H + dH, g=self.g + dg)


# ---------------------------------------------------------------------------
# dynamics


@dataclass
class Dynamics:
    """Discrete dynamics ``x_{t+1} = step(x, u, t)`` with optional ``jacobian(x, u, t) -> (Fx, Fu)``.

    Without ``jacobian`` central differences with step ``1e-6 (1 + |z|)`` are used.
    """

    step: Callable
    n: int
    m: int
    jacobian: Optional[Callable] = None
    linear: Optional[tuple] = None  # (A_seq, B_seq, c_seq) for linear dynamics

    def jacobians(self, x, u, t):
        if self.jacobian is not None:
            return self.jacobian(x, u, t)
        return finite_difference_jacobian(self.step, x, u, t)


def finite_difference_jacobian(step, x, u, t):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n, m = x.size, u.size
    Fx, Fu = np.empty((n, n)), np.empty((n, m))
    for i in range(n):
        h = 1e-6 * (1 + abs(x[i]))
        e = np.zeros(n)
        e[i] = h
        Fx[:, i] = (step(x + e, u, t) - step(x - e, u, t)) / (2 * h)
    for i in range(m):
        h = 1e-6 * (1 + abs(u[i]))
        e = np.zeros(m)
        e[i] = h
        Fu[:, i] = (step(x, u + e, t) - step(x, u - e, t)) / (2 * h)
    return Fx, Fu


def linear_dynamics(A_seq, B_seq, offsets=None) -> Dynamics:
    """``x_{t+1} = A_t x + B_t u (+ c_t)``."""
    A_seq, B_seq = np.asarray(A_seq, float), np.asarray(B_seq, float)
    c = np.zeros(A_seq.shape[:2]) if offsets is None else np.asarray(offsets, float)
    return Dynamics(lambda x, u, t: A_seq[t] @ x + B_seq[t] @ u + c[t],
                    A_seq.shape[1], B_seq.shape[2],
                    lambda x, u, t: (A_seq[t], B_seq[t]), (A_seq, B_seq, c))


def rollout(dyn: Dynamics, x0, U) -> np.ndarray:
    X = np.empty((U.shape[0] + 1, np.size(x0)))
    X[0] = x0
    for t in range(U.shape[0]):
        X[t + 1] = dyn.step(X[t], U[t], t)
    return X


# ---------------------------------------------------------------------------
# backward pass


@dataclass
class BackwardPass:
    K: np.ndarray  # (T, m, n)
    k: np.ndarray  # (T, m)
    Vx: np.ndarray  # (T+1, n)
    Vxx: np.ndarray  # (T+1, n, n)
    Quu: np.ndarray  # (T, m, m), regularization excluded
    expected: float  # predicted cost change for a full step


def _backward(Fx, Fu, cost: QuadraticCost, X, U, mu: float = 0.0, dlo=None, dhi=None) -> BackwardPass:
    """Riccati recursion for the deviation problem around ``(X, U)``.

    ``dlo``, ``dhi`` (T, m) bound the control update. The feedforward is
    clamped to them, feedback rows of clamped controls are zeroed and the
    free rows are re-solved with the clamped ones held fixed.
    """
    T, n, m = U.shape[0], X.shape[1], U.shape[1]
    K = np.zeros((T, m, n))
    k = np.zeros((T, m))
    Vx = np.zeros((T + 1, n))
    Vxx = np.zeros((T + 1, n, n))
    Quus = np.zeros((T, m, m))
    Vx[T] = cost.Hf @ X[T] + cost.gf
    Vxx[T] = cost.Hf
    H = cost.H
    ls = np.einsum("tij,tj->ti", H, np.concatenate([X[:T], U], axis=1)) + cost.g
    Hxx, Huu, Hux = H[:, :n, :n], H[:, n:, n:], H[:, n:, :n]
    FxT = np.ascontiguousarray(Fx.transpose(0, 2, 1))
    FuT = np.ascontiguousarray(Fu.transpose(0, 2, 1))
    eye = np.eye(m)
    dV = 0.0
    for t in range(T - 1, -1, -1):
        A, At, Bt = Fx[t], FxT[t], FuT[t]
        Vn, vn = Vxx[t + 1], Vx[t + 1]
        VB = Vn @ Fu[t]
        Qx = ls[t, :n] + At @ vn
        Qu = ls[t, n:] + Bt @ vn
        Qxx = Hxx[t] + At @ Vn @ A
        Quu = Huu[t] + Bt @ VB
        Qux = Hux[t] + VB.T @ A
        Quu = 0.5 * (Quu + Quu.T)
        Quus[t] = Quu
        if m == 1:
            q = Quu[0, 0] + mu
            if not q > 0:
                raise NonPDQuu(t)
            kt = -Qu / q
            Kt = -Qux / q
        else:
            try:
                L = np.linalg.cholesky(Quu + mu * eye)
            except np.linalg.LinAlgError:
                raise NonPDQuu(t) from None
            sol = -np.linalg.solve(L.T, np.linalg.solve(L, np.column_stack([Qu, Qux])))
            kt, Kt = sol[:, 0], sol[:, 1:]
        if dlo is not None:
            kc = np.minimum(np.maximum(kt, dlo[t]), dhi[t])
            clamped = kc != kt
            if clamped.any():
                Kt = Kt.copy()
                Kt[clamped] = 0.0
                f = ~clamped
                if f.any():
                    Qff = Quu[np.ix_(f, f)] + mu * np.eye(f.sum())
                    rhs = np.column_stack([Qu[f] + Quu[np.ix_(f, clamped)] @ kc[clamped], Qux[f]])
                    sol = -np.linalg.solve(Qff, rhs)
                    kc[f] = np.minimum(np.maximum(sol[:, 0], dlo[t, f]), dhi[t, f])
                    Kt[f] = sol[:, 1:]
                kt = kc
        K[t], k[t] = Kt, kt
        KtQuu = Kt.T @ Quu
        Vx[t] = Qx + KtQuu @ kt + Kt.T @ Qu + Qux.T @ kt
        V = Qxx + KtQuu @ Kt + Kt.T @ Qux + Qux.T @ Kt
        Vxx[t] = 0.5 * (V + V.T)
        dV += kt @ Qu + 0.5 * kt @ Quu @ kt
    return BackwardPass(K, k, Vx, Vxx, Quus, float(dV))


def lqr_backward(ltv, cost: QuadraticCost, X=None, U=None, mu: float = 0.0) -> BackwardPass:
    """Exact LQR recursion for the linear model ``ltv`` (``A_seq``, ``B_seq``) about ``(X, U)``.

    With the default zero nominal, the optimal control is ``u_t = k_t + K_t x_t``.

    Raises
    ------
    NonPDQuu
        If ``Q_uu + mu I`` is not positive definite; ``.step`` holds the time index.
    """
    A_seq, B_seq = np.asarray(ltv.A_seq, float), np.asarray(ltv.B_seq, float)
    T, n, m = A_seq.shape[0], A_seq.shape[1], B_seq.shape[2]
    if cost.T != T:
        raise DataError(f"cost horizon {cost.T} differs from model horizon {T}")
    X = np.zeros((T + 1, n)) if X is None else np.asarray(X, float)
    U = np.zeros((T, m)) if U is None else np.asarray(U, float)
    return _backward(A_seq, B_seq, cost, X, U, mu)


def lqr_rollout(ltv, bp: BackwardPass, x0, X=None, U=None) -> tuple:
    """Closed-loop trajectory of ``u = U_t + k_t + K_t (x - X_t)`` on the linear model."""
    A_seq, B_seq = np.asarray(ltv.A_seq, float), np.asarray(ltv.B_seq, float)
    T, n, m = A_seq.shape[0], A_seq.shape[1], B_seq.shape[2]
    X = np.zeros((T + 1, n)) if X is None else X
    U = np.zeros((T, m)) if U is None else U
    xs = np.empty((T + 1, n))
    us = np.empty((T, m))
    xs[0] = x0
    for t in range(T):
        us[t] = U[t] + bp.k[t] + bp.K[t] @ (xs[t] - X[t])
        xs[t + 1] = A_seq[t] @ xs[t] + B_seq[t] @ us[t]
    return xs, us


# ---------------------------------------------------------------------------
# iLQR


@dataclass
class ILQROptions:
    u_min: Optional[np.ndarray] = None
    u_max: Optional[np.ndarray] = None
    max_iter: int = 100
    tol: float = 1e-6  # relative cost decrease
    min_alpha: float = 2.0 ** -10
    mu_init: float = 0.0
    raise_on_failure: bool = False


@dataclass
class ILQRSolution:
    X: np.ndarray  # (T+1, n) nominal states
    U: np.ndarray  # (T, m) nominal controls
    k: np.ndarray  # (T, m) last feedforward
    K: np.ndarray  # (T, m, n) feedback gains
    Quu: np.ndarray  # (T, m, m)
    Vx: np.ndarray
    Vxx: np.ndarray
    costs: np.ndarray  # cost after each accepted iteration, starting with the initial cost
    converged: bool
    iterations: int
    status: str = "converged"
    mu: float = 0.0

    @property
    def cost(self) -> float:
        return float(self.costs[-1])

    @property
    def Sigma(self) -> np.ndarray:
        return exploration_covariances(self.Quu)


def _bounds(opts: ILQROptions, m: int):
    lo = -np.inf * np.ones(m) if opts.u_min is None else np.broadcast_to(np.asarray(opts.u_min, float), (m,))
    hi = np.inf * np.ones(m) if opts.u_max is None else np.broadcast_to(np.asarray(opts.u_max, float), (m,))
    if np.any(lo > hi):
        raise DataError("u_min exceeds u_max")
    return lo, hi


def _jacobians(dyn, X, U):
    if dyn.linear is not None:
        return dyn.linear[0], dyn.linear[1]
    jac = [dyn.jacobians(X[t], U[t], t) for t in range(U.shape[0])]
    return np.array([j[0] for j in jac]), np.array([j[1] for j in jac])


def _forward(dyn, cost, X, U, bp, alpha, lo, hi):
    T = U.shape[0]
    Xn = np.empty_like(X)
    Un = np.empty_like(U)
    Xn[0] = X[0]
    Uff = U + alpha * bp.k
    K = bp.K
    if dyn.linear is not None:
        A, B, c = dyn.linear
        for t in range(T):
            u = np.minimum(np.maximum(Uff[t] + K[t] @ (Xn[t] - X[t]), lo), hi)
            Un[t] = u
            Xn[t + 1] = A[t] @ Xn[t] + B[t] @ u + c[t]
    else:
        for t in range(T):
            u = np.minimum(np.maximum(Uff[t] + K[t] @ (Xn[t] - X[t]), lo), hi)
            Un[t] = u
            Xn[t + 1] = dyn.step(Xn[t], u, t)
    if not np.all(np.isfinite(Xn)):
        return Xn, Un, np.inf
    return Xn, Un, cost.total(Xn, Un)


def ilqr(dyn: Dynamics, cost: QuadraticCost, x0, U_init,
         opts: Optional[ILQROptions] = None) -> ILQRSolution:
    """Iterative LQR with clamped controls and backtracking ``alpha in {1, 1/2, ...}``.

    Controls are clamped to ``[u_min, u_max]`` in every rollout. In the
    backward pass the feedforward is clamped so the nominal stays feasible
    and feedback rows of clamped controls are zeroed.
    A step is accepted when the cost does not increase. ``Q_uu`` is
    regularized by ``mu I``, ``mu`` starting at ``opts.mu_init`` and
    growing from 1e-6 by 10x (capped at 1e6) whenever ``Q_uu`` is not
    positive definite or the line search fails.

    Raises
    ------
    LineSearchFailed
        Only with ``opts.raise_on_failure``; ``.solution`` holds the best iterate.
    NonPDQuu
        If ``Q_uu`` stays indefinite at the largest regularization.
    """
    opts = opts or ILQROptions()
    U = np.array(U_init, dtype=float, copy=True)
    if U.ndim == 1:
        U = U[:, None]
    T, m = U.shape
    if T < 2:
        raise DataError("horizon must be at least 2")
    if cost.T != T:
        raise DataError(f"cost horizon {cost.T} differs from control horizon {T}")
    lo, hi = _bounds(opts, m)
    if np.any(U < lo) or np.any(U > hi):
        raise DataError("initial controls violate the bounds")
    X = rollout(dyn, np.asarray(x0, float), U)
    J = cost.total(X, U)
    if not np.isfinite(J):
        raise DataError("initial rollout diverges")
    costs = [J]
    mu = opts.mu_init
    status, converged, it = "max_iter", False, 0
    bp = None
    for it in range(1, opts.max_iter + 1):
        Fx, Fu = _jacobians(dyn, X, U)
        dlo, dhi = lo - U, hi - U
        accepted = False
        while True:
            try:
                bp = _backward(Fx, Fu, cost, X, U, mu, dlo, dhi)
            except NonPDQuu:
                mu = max(mu * MU_FACTOR, MU_MIN)
                if mu > MU_MAX:
                    raise
                continue
            alpha = 1.0
            while alpha >= opts.min_alpha:
                Xn, Un, Jn = _forward(dyn, cost, X, U, bp, alpha, lo, hi)
                if Jn <= J:
                    accepted = True
                    break
                alpha *= 0.5
            if accepted:
                break
            mu = max(mu * MU_FACTOR, MU_MIN)
            if mu > MU_MAX:
                break
        if not accepted:
            status = "line_search_failed"
            break
        decrease = J - Jn
        X, U, J = Xn, Un, Jn
        costs.append(J)
        if alpha == 1.0 and mu > 0:
            mu = mu / MU_FACTOR if mu / MU_FACTOR >= MU_MIN else opts.mu_init
        if decrease <= opts.tol * max(abs(J), 1e-12):
            status, converged = "converged", True
            break
    # gains consistent with the final nominal
    Fx, Fu = _jacobians(dyn, X, U)
    mu_f = mu
    while True:
        try:
            bp = _backward(Fx, Fu, cost, X, U, mu_f, lo - U, hi - U)
            break
        except NonPDQuu:
            mu_f = max(mu_f * MU_FACTOR, MU_MIN)
            if mu_f > MU_MAX:
                raise
    sol = ILQRSolution(X, U, bp.k, bp.K, bp.Quu + mu_f * np.eye(m), bp.Vx, bp.Vxx,
                       np.array(costs), converged, it, status, mu)
    if status == "line_search_failed" and opts.raise_on_failure:
        raise LineSearchFailed("no step decreased the cost", solution=sol)
    return sol


# ---------------------------------------------------------------------------
# trajectory distributions


def exploration_covariances(Quu) -> np.ndarray:
    """``Sigma_t = Q_uu,t^-1``, symmetrized and jittered to stay positive definite."""
    Quu = np.asarray(Quu, dtype=float)
    out = np.empty_like(Quu)
    m = Quu.shape[-1]
    for t, Q in enumerate(Quu):
        S = np.linalg.solve(0.5 * (Q + Q.T), np.eye(m))
        S = 0.5 * (S + S.T)
        w = np.linalg.eigvalsh(S)
        if w[0] <= 0:
            S = S + (abs(w[0]) + 1e-12 * max(abs(w[-1]), 1.0)) * np.eye(m)
        out[t] = S
    return out


@dataclass
class TrajectoryDistribution:
    """Linear-Gaussian dynamics and policy.

    ``x_{t+1} ~ N(c_t + A_t x + B_t u, Sigma_f,t)``,
    ``u_t ~ N(u_nom,t + k_t + K_t (x - x_nom,t), Sigma_t)``, ``x_0 ~ N(mu0, P0)``.
    """

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    Sigma_f: np.ndarray
    x_nom: np.ndarray
    u_nom: np.ndarray
    k: np.ndarray
    K: np.ndarray
    Sigma: np.ndarray
    mu0: np.ndarray
    P0: np.ndarray

    @property
    def T(self) -> int:
        return self.A.shape[0]

    def policy_affine(self):
        """``(kbar, K)`` with mean control ``kbar_t + K_t x``."""
        kbar = self.u_nom + self.k - np.einsum("tij,tj->ti", self.K, self.x_nom[:self.T])
        return kbar, self.K

    def with_policy(self, x_nom, u_nom, k, K, Sigma) -> "TrajectoryDistribution":
        return replace(self, x_nom=x_nom, u_nom=u_nom, k=k, K=K, Sigma=Sigma)

    def marginals(self):
        """State means and covariances ``(T+1, n)``, ``(T+1, n, n)`` under this distribution."""
        kbar, K = self.policy_affine()
        T, n = self.T, self.A.shape[1]
        m = np.empty((T + 1, n))
        P = np.empty((T + 1, n, n))
        m[0], P[0] = self.mu0, self.P0
        for t in range(T):
            Acl = self.A[t] + self.B[t] @ K[t]
            m[t + 1] = self.c[t] + Acl @ m[t] + self.B[t] @ kbar[t]
            Pn = Acl @ P[t] @ Acl.T + self.B[t] @ self.Sigma[t] @ self.B[t].T + self.Sigma_f[t]
            P[t + 1] = 0.5 * (Pn + Pn.T)
        return m, P


def exploration_policy(sol: ILQRSolution, dist: TrajectoryDistribution) -> TrajectoryDistribution:
    """Gaussian controller around ``sol`` with ``Sigma_t = Q_uu,t^-1``."""
    T, m = sol.U.shape
    return dist.with_policy(sol.X, sol.U, np.zeros((T, m)), sol.K, exploration_covariances(sol.Quu))


def _gauss_kl_affine(a, B, S1, c, D, S2, mean, cov):
    """``E_z KL(N(a + B z, S1) || N(c + D z, S2))`` for ``z ~ N(mean, cov)``."""
    d = S1.shape[0]
    try:
        L2 = linalg.cho_factor(S2)
    except linalg.LinAlgError:
        raise SingularCovariance("reference covariance is not positive definite") from None
    s1 = np.linalg.slogdet(S1)
    if s1[0] <= 0:
        raise SingularCovariance("covariance is not positive definite")
    logdet2 = 2 * np.sum(np.log(np.diag(L2[0])))
    E = B - D
    delta = a - c + E @ mean
    quad = delta @ linalg.cho_solve(L2, delta) + np.trace(linalg.cho_solve(L2, E @ cov @ E.T))
    tr = np.trace(linalg.cho_solve(L2, S1))
    return 0.5 * (tr - d + logdet2 - s1[1] + quad)


def kl_traj(p: TrajectoryDistribution, q: TrajectoryDistribution) -> float:
    """``KL(p(tau) || q(tau))`` for factored linear-Gaussian trajectory distributions.

    Sums the initial-state term and, at each step, the expected KL of the
    control and transition conditionals under the state marginals of ``p``.

    Raises
    ------
    SingularCovariance
        If a covariance of ``q`` (or ``p``) is not positive definite.
    """
    if p.T != q.T or p.A.shape != q.A.shape or p.B.shape != q.B.shape:
        raise DataError("trajectory distributions have different shapes")
    mx, Px = p.marginals()
    kp, Kp = p.policy_affine()
    kq, Kq = q.policy_affine()
    n, m = p.A.shape[1], p.B.shape[2]
    total = _gauss_kl_affine(p.mu0, np.zeros((n, 0)), p.P0, q.mu0, np.zeros((n, 0)), q.P0,
                             np.zeros(0), np.zeros((0, 0)))
    for t in range(p.T):
        total += _gauss_kl_affine(kp[t], Kp[t], p.Sigma[t], kq[t], Kq[t], q.Sigma[t], mx[t], Px[t])
        # joint of (x, u) under p
        ms = np.concatenate([mx[t], kp[t] + Kp[t] @ mx[t]])
        G = np.vstack([np.eye(n), Kp[t]])
        Ps = G @ Px[t] @ G.T
        Ps[n:, n:] += p.Sigma[t]
        Fp = np.hstack([p.A[t], p.B[t]])
        Fq = np.hstack([q.A[t], q.B[t]])
        if (np.array_equal(Fp, Fq) and np.array_equal(p.c[t], q.c[t])
                and np.array_equal(p.Sigma_f[t], q.Sigma_f[t])):
            continue
        total += _gauss_kl_affine(p.c[t], Fp, p.Sigma_f[t], q.c[t], Fq, q.Sigma_f[t], ms, Ps)
    return float(max(total, 0.0))


def policy_penalty(prev: TrajectoryDistribution, n: int):
    """Quadratic terms of ``-log prev(u|x)`` (constants dropped) as ``(dH, dg)``."""
    kbar, K = prev.policy_affine()
    T, m = kbar.shape
    dH = np.zeros((T, n + m, n + m))
    dg = np.zeros((T, n + m))
    for t in range(T):
        M = np.hstack([-K[t], np.eye(m)])
        W = np.linalg.inv(prev.Sigma[t])
        W = 0.5 * (W + W.T)
        D = M.T @ W @ M
        dH[t] = 0.5 * (D + D.T)
        dg[t] = -M.T @ W @ kbar[t]
    return dH, dg


@dataclass
class KLResult:
    solution: ILQRSolution
    distribution: TrajectoryDistribution
    kl: float
    nu: float
    dual_steps: int


def _tempered(cost: QuadraticCost, pen, nu: float) -> QuadraticCost:
    """``(c - nu log prev) / (1 + nu)``."""
    if nu == 0:
        return cost
    w = 1.0 / (1.0 + nu)
    return replace(cost, H=w * (cost.H + nu * pen[0]), g=w * (cost.g + nu * pen[1]),
                   Hf=w * cost.Hf, gf=w * cost.gf)


def ilqr_kl(dyn: Dynamics, cost: QuadraticCost, x0, U_init, base: TrajectoryDistribution,
            prev: Optional[TrajectoryDistribution], eps: float = 10.0, nu0: float = 0.0,
            opts: Optional[ILQROptions] = None, max_dual: int = 10) -> KLResult:
    """Maximum-entropy iLQR whose trajectory distribution stays within ``eps`` nats of ``prev``.

    For a multiplier ``nu`` the cost ``(c - nu log prev(u|x)) / (1 + nu)``
    is optimized and the Gaussian policy takes ``Sigma = Q_uu^-1``; large
    ``nu`` reproduces ``prev``. ``nu`` is adjusted in log space, starting
    from ``nu0``, until ``KL <= 1.1 eps`` or ``max_dual`` steps; the
    feasible iterate with the smallest ``nu`` is returned (the last one
    when none is feasible). Each solve is warm-started from the previous
    one. ``base`` supplies the dynamics part.
    """
    if prev is None:
        sol = ilqr(dyn, cost, x0, U_init, opts)
        return KLResult(sol, exploration_policy(sol, base), 0.0, 0.0, 0)
    pen = policy_penalty(prev, cost.n)
    nu = nu0
    lo, hi = None, None  # infeasible / feasible multipliers
    best = None
    res = None
    U_start = U_init
    for step in range(max_dual):
        sol = ilqr(dyn, _tempered(cost, pen, nu), x0, U_start, opts)
        U_start = sol.U
        dist = exploration_policy(sol, base)
        kl = kl_traj(dist, prev)
        res = KLResult(sol, dist, kl, nu, step + 1)
        if kl <= 1.1 * eps:
            if best is None or nu < best.nu:
                best = res
            if kl >= 0.5 * eps or nu == 0:
                break
            hi = nu
            nu = nu / 10.0 if lo is None else np.sqrt(lo * hi)
        else:
            lo = nu
            if hi is None:
                nu = 1e-2 if nu == 0 else nu * 10.0
            else:
                nu = np.sqrt(max(lo, 1e-12) * hi)
    return best if best is not None else res


# ---------------------------------------------------------------------------
# pendulum damping task and RL loop


@dataclass
class RLTask:
    """A dynamics ``env`` with cost, initial state, horizon and control bounds."""

    env: Dynamics
    cost: QuadraticCost
    x0: np.ndarray
    u_min: float
    u_max: float
    dt: float = 0.01

    @property
    def T(self) -> int:
        return self.cost.T


def pendulum_damping_task(T: int = 400, u_max: float = 10.0, params=None,
                          theta0: float = np.pi - 0.1, scale: float = 1.0) -> RLTask:
    """Damp a pendulum released near the upright position.

    Quadratic cost about the hanging rest state with weights
    ``scale * diag(1, 0.1, 0.1, 0.1)`` on the state and ``scale * 1e-3`` on the
    control.
    """
    from .simulators import PendulumParams, pendulum_step

    p = params or PendulumParams()
    env = Dynamics(lambda x, u, t: pendulum_step(x, u, p),
                   4, 1,
                   lambda x, u, t: pendulum_step(x, u, p, jacobian=True)[1:])
    Q = scale * np.diag([1.0, 0.1, 0.1, 0.1])
    R = scale * np.array([[1e-3]])
    cost = QuadraticCost.tracking(Q, R, T, Qf=Q)
    return RLTask(env, cost, np.array([theta0, 0.0, 0.0, 0.0]), -u_max, u_max, p.dt)


def optimal_cost(task: RLTask, max_iter: int = 200, U_init=None) -> ILQRSolution:
    """iLQR on the true dynamics."""
    U0 = np.zeros((task.T, task.env.m)) if U_init is None else U_init
    return ilqr(task.env, task.cost, task.x0, U0,
                ILQROptions(task.u_min, task.u_max, max_iter=max_iter))


MODEL_TRUTH, MODEL_LTV, MODEL_LTV_PRIOR, MODEL_LTI = "truth", "ltv", "ltv_prior", "lti"


@dataclass
class RLResult:
    costs: np.ndarray  # true cost of the mean policy after each iteration
    solution: ILQRSolution
    distribution: Optional[TrajectoryDistribution]
    kls: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _policy_rollout(task: RLTask, X_nom, U_nom, K, noise=None, env=None):
    env = task.env if env is None else env
    T, m = U_nom.shape
    X = np.empty((T + 1, task.env.n))
    U = np.empty((T, m))
    X[0] = task.x0
    for t in range(T):
        u = U_nom[t] + K[t] @ (X[t] - X_nom[t])
        if noise is not None:
            u = u + noise[t]
        U[t] = np.clip(u, task.u_min, task.u_max)
        X[t + 1] = env.step(X[t], U[t], t)
    return X, U


def _fit_model(model, X, U, dt, lam, prev_model, prior_strength, lti_sigma_f, affine):
    """Fit ``x+ = A x + B u (+ c)``; returns ``(fit, A, B, c, Sigma_f)``."""
    from .ltv import fit_l2

    T, n = U.shape[0], X.shape[1]
    m = U.shape[1]
    Ua = np.hstack([U, np.ones((T, 1))]) if affine else U
    traj = Trajectory(X, np.vstack([Ua, Ua[-1:]]), dt)
    if model == MODEL_LTI:
        lti = fit_lti(traj, 1e-6)
        A = np.broadcast_to(lti.A, (T, n, n)).copy()
        Ba = np.broadcast_to(lti.B, (T, n, Ua.shape[1])).copy()
        fit, Sf = None, np.broadcast_to(lti_sigma_f * np.eye(n), (T, n, n)).copy()
    else:
        prior = None
        if model == MODEL_LTV_PRIOR and prev_model is not None:
            prior = _model_prior(prev_model, prior_strength)
        fit = fit_l2(traj, lam, prior=prior, max_passes=2)
        A, Ba = fit.A_seq[:T], fit.B_seq[:T]
        Sf = _parameter_uncertainty(fit, X, Ua)
    c = Ba[:, :, m] if affine else np.zeros((T, n))
    return fit, A, Ba[:, :, :m].copy(), c, Sf


def rl_loop(task: RLTask, model: str = MODEL_LTV, iters: int = 25, seed: int = 0,
            lam: float = 1.0, eps: float = 1000.0, init_std: float = 1.0,
            explore_scale: float = 1.0, lti_sigma_f: float = 1e-4,
            prior_strength: float = 1e-3, affine: bool = False,
            max_ilqr_iter: int = 30, adapt_eps: bool = True) -> RLResult:
    """Rollout, fit a dynamics model, re-optimize under a KL limit; repeat.

    The first rollout applies Gaussian controls with standard deviation
    ``init_std``, which also serves as the first reference distribution.
    Later rollouts follow the current Gaussian policy with covariance
    ``explore_scale^2 Q_uu^-1``. ``costs[i]`` is the true cost of the
    noise-free policy after iteration ``i``. ``model="truth"`` skips
    learning and re-runs iLQR on the true dynamics. With ``affine`` the
    fitted models carry a per-step offset, estimated as the coefficient of
    a constant input.

    With ``adapt_eps`` the KL limit is rescaled after each iteration by
    ``pred / (2 (pred - actual))``, clipped to [0.1, 2] and to
    ``[eps / 100, eps]``. ``pred`` is the cost decrease the current model
    predicts for the new policy over the previous one and ``actual`` the
    decrease measured on the true system.
    """
    from .simulators import make_rng, STREAM_INPUT

    if iters < 1:
        raise DataError("iters must be at least 1")
    T, n, m = task.T, task.env.n, task.env.m
    opts = ILQROptions(task.u_min, task.u_max, max_iter=max_ilqr_iter)
    if model == MODEL_TRUTH:
        sol = None
        U = np.zeros((T, m))
        costs = []
        for _ in range(iters):
            sol = ilqr(task.env, task.cost, task.x0, U, opts)
            U = sol.U
            costs.append(sol.cost)
        return RLResult(np.array(costs), sol, None)
    if model not in (MODEL_LTV, MODEL_LTV_PRIOR, MODEL_LTI):
        raise DataError(f"unknown model type {model!r}")

    rng = make_rng(seed, STREAM_INPUT)
    X_nom = np.zeros((T + 1, n))
    X_nom[:] = task.x0
    U_nom = np.zeros((T, m))
    K_nom = np.zeros((T, m, n))
    Sig = np.broadcast_to(init_std ** 2 * np.eye(m), (T, m, m)).copy()
    noise = init_std * rng.standard_normal((T, m))
    X_data, U_data = _policy_rollout(task, X_nom, U_nom, K_nom, noise)
    prev_model = None
    sol = None
    dist = None
    nu = 0.0
    eps_t = eps
    costs, kls = [], []
    for it in range(iters):
        fit, A, B, c, Sf = _fit_model(model, X_data, U_data, task.dt, lam, prev_model,
                                      prior_strength, lti_sigma_f, affine)
        prev_model = fit
        dyn = linear_dynamics(A, B, c)
        base = TrajectoryDistribution(A, B, c, Sf, X_nom, U_nom,
                                      np.zeros((T, m)), K_nom, Sig,
                                      np.asarray(task.x0, float), 1e-8 * np.eye(n))
        res = ilqr_kl(dyn, task.cost, task.x0, U_nom, base, base, eps_t, nu / 10.0, opts)
        nu = res.nu
        sol, dist = res.solution, res.distribution
        if adapt_eps and costs and np.isfinite(costs[-1]):
            Xp, Up = _policy_rollout(task, X_nom, U_nom, K_nom, env=dyn)
            pred = task.cost.total(Xp, Up) - sol.cost
        X_nom, U_nom, K_nom, Sig = sol.X, sol.U, sol.K, dist.Sigma
        kls.append(res.kl)
        Xe, Ue = _policy_rollout(task, X_nom, U_nom, K_nom)
        costs.append(task.cost.total(Xe, Ue) if np.all(np.isfinite(Xe)) else np.inf)
        if adapt_eps and len(costs) > 1 and np.all(np.isfinite(costs[-2:])) and pred > 0:
            actual = costs[-2] - costs[-1]
            factor = pred / (2.0 * max(pred - actual, 1e-12 * pred))
            eps_t = float(np.clip(eps_t * np.clip(factor, 0.1, 2.0), eps / 100.0, eps))
        L = np.linalg.cholesky(Sig)
        noise = explore_scale * np.einsum("tij,tj->ti", L, rng.standard_normal((T, m)))
        X_data, U_data = _policy_rollout(task, X_nom, U_nom, K_nom, noise)
        if not np.all(np.isfinite(X_data)):
            costs.extend([np.inf] * (iters - it - 1))
            break
    return RLResult(np.array(costs), sol, dist, np.array(kls))


def _parameter_uncertainty(fit, X, U) -> np.ndarray:
    """``Sigma_f,t = C_t P_t C_t'`` with ``C_t = I kron [x_t' u_t']`` from the smoother covariances."""
    T = U.shape[0]
    n = X.shape[1]
    out = np.empty((T, n, n))
    for t in range(T):
        phi = np.concatenate([X[t], U[t]])
        C = np.kron(np.eye(n), phi)
        S = C @ fit.param_covs[t] @ C.T
        out[t] = 0.5 * (S + S.T) + 1e-12 * np.eye(n)
    return out


def _model_prior(model, strength: float):
    """Gaussian prior ``N(k_prev,t, P_prev,t / strength)`` from a previous LTV fit.

    The covariance is expressed in the unit-noise scale the smoother works in.
    """
    K = model.params
    P = model.param_covs / max(model.info.get("sigma2", 1.0), 1e-300)

    def prior(t):
        if t >= K.shape[0]:
            return None, None
        return K[t], P[t] / strength
    return prior
