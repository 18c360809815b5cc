"""Proximal operators and a linearized ADMM solver.

The solver targets problems of the form::

    minimize  1/2 ||y - A k||^2 + lam * g(D k)

with ``g`` either the elementwise L1 norm or a sum of group 2-norms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import linalg, sparse

from .errors import DataError

L1 = "l1"
GROUP_L2 = "group_l2"


def prox_l1(z, t: float) -> np.ndarray:
    """Soft threshold ``sign(z) * max(|z| - t, 0)``."""
    if t < 0:
        raise DataError("threshold must be nonnegative")
    z = np.asarray(z, dtype=float)
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def _group_index(groups, size: int):
    """Normalize a group description to an (n_groups, group_size) index array or list."""
    if groups is None:
        return [np.arange(size)]
    if isinstance(groups, np.ndarray) and groups.ndim == 2 and groups.size == size:
        return groups
    if isinstance(groups, (int, np.integer)):
        if size % groups:
            raise DataError(f"group size {groups} does not divide {size}")
        return np.arange(size).reshape(-1, groups)
    groups = [np.asarray(g, dtype=int) for g in groups]
    covered = np.sort(np.concatenate(groups)) if groups else np.array([], int)
    if covered.size != size or np.any(covered != np.arange(size)):
        raise DataError("groups must partition the penalized vector exactly once")
    sizes = {g.size for g in groups}
    if len(sizes) == 1:
        return np.vstack(groups)
    return groups


def prox_group_l2(z, groups, t: float) -> np.ndarray:
    """Block soft threshold ``max(0, 1 - t/||z_g||) z_g`` for every group.

    ``groups`` is a group size (contiguous equal blocks), a list of index
    arrays partitioning ``z``, or ``None`` for a single group.
    """
    if t < 0:
        raise DataError("threshold must be nonnegative")
    z = np.asarray(z, dtype=float)
    idx = _group_index(groups, z.size)
    out = np.zeros_like(z)
    if isinstance(idx, np.ndarray):
        blocks = z[idx]
        norms = np.linalg.norm(blocks, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(norms > t, 1.0 - t / norms, 0.0)
        out[idx] = blocks * scale[:, None]
        return out
    for g in idx:
        nrm = np.linalg.norm(z[g])
        if nrm > t:
            out[g] = (1.0 - t / nrm) * z[g]
    return out


def group_norms(z, groups) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    idx = _group_index(groups, z.size)
    if isinstance(idx, np.ndarray):
        return np.linalg.norm(z[idx], axis=1)
    return np.array([np.linalg.norm(z[g]) for g in idx])


def difference_operator(T: int, order: int, block: int = 1) -> sparse.csr_matrix:
    """Sparse ``order``-th difference operator on ``T`` stacked blocks of size ``block``.

    Row block ``t`` computes ``sum_i c_i k_{t+i}`` with binomial coefficients
    (``k_{t+1} - k_t`` for order 1, ``k_{t+2} - 2k_{t+1} + k_t`` for order 2).
    """
    if order < 1:
        raise DataError("difference order must be >= 1")
    if T < order + 1:
        raise DataError(f"need at least {order + 1} samples for order {order} differences")
    coeffs = np.array([1.0])
    for _ in range(order):
        coeffs = np.convolve(coeffs, [-1.0, 1.0])
    rows = T - order
    D1 = sparse.diags(list(coeffs), offsets=list(range(order + 1)), shape=(rows, T), format="csr")
    if block == 1:
        return D1
    return sparse.kron(D1, sparse.identity(block), format="csr")


class BlockDiagonal:
    """Block-diagonal regressor with equally shaped blocks ``(T, p, q)``."""

    def __init__(self, blocks):
        self.blocks = np.asarray(blocks, dtype=float)
        if self.blocks.ndim != 3:
            raise DataError("blocks must be a (T, p, q) array")
        self._bt = np.ascontiguousarray(self.blocks.transpose(0, 2, 1))

    @property
    def shape(self):
        T, p, q = self.blocks.shape
        return T * p, T * q

    def matvec(self, x):
        T, p, q = self.blocks.shape
        return np.matmul(self.blocks, x.reshape(T, q, 1)).ravel()

    def rmatvec(self, y):
        T, p, q = self.blocks.shape
        return np.matmul(self._bt, y.reshape(T, p, 1)).ravel()

    def gram_blocks(self):
        return np.einsum("tki,tkj->tij", self.blocks, self.blocks)

    def toarray(self):
        return linalg.block_diag(*self.blocks)


class _DenseQuadratic:
    def __init__(self, A, y):
        self.A = np.asarray(A, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.Aty = self.A.T @ self.y
        self._gram = self.A.T @ self.A
        self._mu = None

    def value(self, k):
        r = self.y - self.A @ k
        return 0.5 * float(r @ r)

    def norm2(self):
        """Squared spectral norm of ``A``."""
        return float(np.max(np.linalg.eigvalsh(self._gram))) if self._gram.size else 0.0

    def gradient(self, k):
        return self.A.T @ (self.A @ k - self.y)

    def prox(self, v, mu):
        if self._mu != mu:
            M = self._gram + np.eye(self._gram.shape[0]) / mu
            self._chol = linalg.cho_factor(M)
            self._mu = mu
        return linalg.cho_solve(self._chol, self.Aty + v / mu)


class _BlockQuadratic:
    def __init__(self, A: BlockDiagonal, y):
        self.A = A
        self.y = np.asarray(y, dtype=float)
        self.Aty = A.rmatvec(self.y)
        self._gram = A.gram_blocks()
        self._mu = None

    def value(self, k):
        r = self.y - self.A.matvec(k)
        return 0.5 * float(r @ r)

    def norm2(self):
        return float(np.max(np.linalg.eigvalsh(self._gram))) if self._gram.size else 0.0

    def gradient(self, k):
        return self.A.rmatvec(self.A.matvec(k) - self.y)

    def prox(self, v, mu):
        T, q, _ = self._gram.shape
        if self._mu != mu:
            self._inv = np.linalg.inv(self._gram + np.eye(q) / mu)
            self._mu = mu
        rhs = (self.Aty + v / mu).reshape(T, q)
        return np.matmul(self._inv, rhs[:, :, None]).ravel()


@dataclass
class ProxProblem:
    """``minimize 1/2||y - A k||^2 + lam * penalty(D k)``.

    ``regressors`` may be a dense array or a :class:`BlockDiagonal`;
    ``linear_op`` may be dense or scipy-sparse (identity when ``None``).
    ``groups`` partitions the rows of ``D`` for the group penalty.
    """

    regressors: Union[np.ndarray, BlockDiagonal]
    targets: np.ndarray
    penalty: Optional[str] = GROUP_L2
    linear_op: Optional[object] = None
    lam: float = 0.0
    groups: Optional[object] = None

    def __post_init__(self):
        if self.lam < 0:
            raise DataError("lam must be nonnegative")
        if self.penalty not in (L1, GROUP_L2, None):
            raise DataError(f"unknown penalty {self.penalty!r}")
        K = self.regressors.shape[1]
        if self.linear_op is None:
            self.linear_op = sparse.identity(K, format="csr")
        if self.linear_op.shape[1] != K:
            raise DataError("linear operator and regressor dimensions disagree")
        self._gidx = None
        if self.penalty == GROUP_L2:
            self._gidx = _group_index(self.groups, self.linear_op.shape[0])

    def quadratic(self):
        if isinstance(self.regressors, BlockDiagonal):
            return _BlockQuadratic(self.regressors, self.targets)
        return _DenseQuadratic(self.regressors, self.targets)

    def penalty_value(self, z) -> float:
        if self.penalty is None or self.lam == 0:
            return 0.0
        if self.penalty == L1:
            return self.lam * float(np.sum(np.abs(z)))
        return self.lam * float(np.sum(group_norms(z, self._gidx_or_groups())))

    def penalty_prox(self, v, t):
        if self.penalty is None or self.lam == 0:
            return v
        if self.penalty == L1:
            return prox_l1(v, t * self.lam)
        return prox_group_l2(v, self._gidx_or_groups(), t * self.lam)

    def _gidx_or_groups(self):
        return self._gidx

    def objective(self, k) -> float:
        return self.quadratic().value(k) + self.penalty_value(self.linear_op @ k)

    def project_subgradient(self, z, s):
        """Closest element of the penalty subdifferential at ``z`` to ``s``."""
        s = np.asarray(s, dtype=float).copy()
        if self.penalty == L1:
            nz = z != 0
            s[nz] = np.sign(z[nz])
            return np.clip(s, -1.0, 1.0)
        idx = _group_index(self.groups, z.size)
        for g in (idx if not isinstance(idx, np.ndarray) else list(idx)):
            nrm = np.linalg.norm(z[g])
            if nrm > 0:
                s[g] = z[g] / nrm
            else:
                sn = np.linalg.norm(s[g])
                if sn > 1:
                    s[g] /= sn
        return s

    def kkt_residual(self, k, s) -> float:
        """``||A'(Ak - y) + lam D's||_inf`` for a subgradient ``s`` of the penalty at ``Dk``."""
        grad = self.quadratic().gradient(k)
        return float(np.max(np.abs(grad + self.lam * (self.linear_op.T @ s))))


@dataclass
class ADMMOptions:
    """Knobs for :func:`linearized_admm`.

    ``sigma`` is the fixed penalty-parameter reciprocal (ADMM step on the
    constraint); the proximal step on ``f`` is ``step_fraction*sigma/||D||^2``.
    ``sigma=None`` uses ``1/||A||^2``, which is 1 for an orthonormal ``A`` and
    keeps the iteration count independent of the data scale.
    """

    sigma: Optional[float] = None
    step_fraction: float = 0.95
    max_iter: int = 20000
    rel_tol: float = 1e-6
    abs_tol: float = 1e-10
    power_iters: int = 50
    relaxation: float = 1.0


@dataclass
class ADMMReport:
    solution: np.ndarray
    iterations: int
    primal_residual: float
    dual_residual: float
    converged: bool
    z: np.ndarray = field(repr=False, default=None)
    subgradient: np.ndarray = field(repr=False, default=None)
    objective_trace: np.ndarray = field(repr=False, default=None)
    objective: float = float("nan")
    sigma: float = float("nan")


def operator_norm(D, iters: int = 50) -> float:
    """Largest singular value of ``D`` by power iteration on ``D'D``."""
    rng = np.random.default_rng(0)
    v = rng.standard_normal(D.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = D.T @ (D @ v)
        lam = np.linalg.norm(w)
        if lam == 0:
            return 0.0
        v = w / lam
    return float(np.sqrt(lam))


def linearized_admm(problem: ProxProblem, opts: Optional[ADMMOptions] = None,
                    x0=None) -> ADMMReport:
    """Solve ``minimize f(k) + g(Dk)`` by linearized ADMM.

    Iterates::

        k <- prox_{mu f}(k - (mu/sigma) D'(Dk - z + w))
        z <- prox_{sigma g}(Dk + w)
        w <- w + Dk - z

    The returned ``solution`` is the iterate with the lowest objective seen;
    ``converged`` is False when ``max_iter`` is reached first.
    """
    opts = opts or ADMMOptions()
    f = problem.quadratic()
    D = problem.linear_op
    K = problem.regressors.shape[1]
    x = np.zeros(K) if x0 is None else np.asarray(x0, dtype=float).copy()
    if problem.penalty is None or problem.lam == 0:
        # penalty inactive: plain least squares (proximal-point on f)
        sol = _unpenalized(problem, f, x)
        z = D @ sol
        obj = f.value(sol)
        return ADMMReport(sol, 1, 0.0, 0.0, True, z, np.zeros_like(z), np.array([obj]), obj)

    dnorm = operator_norm(D, opts.power_iters)
    sigma = opts.sigma
    if sigma is None:
        a2 = f.norm2()
        sigma = 1.0 / a2 if a2 > 0 else 1.0
    Dt = D.T.tocsr() if sparse.issparse(D) else D.T
    mu = opts.step_fraction * sigma / max(dnorm ** 2, 1e-300)
    Dx = D @ x
    z = problem.penalty_prox(Dx, sigma)
    w = np.zeros_like(z)
    trace = []
    best_obj, best_x = np.inf, x
    converged = False
    r_norm = s_norm = np.inf
    it = 0
    for it in range(1, opts.max_iter + 1):
        x = f.prox(x - (mu / sigma) * (Dt @ (Dx - z + w)), mu)
        Dx = D @ x
        Dx_rel = opts.relaxation * Dx + (1 - opts.relaxation) * z
        z_old = z
        z = problem.penalty_prox(Dx_rel + w, sigma)
        w = w + Dx_rel - z
        obj = f.value(x) + problem.penalty_value(Dx)
        trace.append(obj)
        if obj < best_obj:
            best_obj, best_x = obj, x
        r_norm = np.linalg.norm(Dx - z)
        s_norm = np.linalg.norm(Dt @ (z - z_old)) / sigma
        scale = max(np.linalg.norm(Dx), np.linalg.norm(z))
        eps = opts.abs_tol + opts.rel_tol * scale
        if r_norm < eps and s_norm < eps:
            converged = True
            break
    sol = x if converged else best_x
    subgrad = problem.project_subgradient(z, w / (sigma * problem.lam))
    return ADMMReport(sol, it, float(r_norm), float(s_norm), converged, z, subgrad,
                      np.asarray(trace), float(f.value(sol) + problem.penalty_value(D @ sol)),
                      float(sigma))


def _unpenalized(problem, f, x):
    A = problem.regressors
    if isinstance(A, BlockDiagonal):
        sol = np.linalg.lstsq(A.toarray(), problem.targets, rcond=None)[0]
        return sol
    return np.linalg.lstsq(np.asarray(A), problem.targets, rcond=None)[0]


def trend_filter(y, lam: float, order: int = 1, opts: Optional[ADMMOptions] = None,
                 return_report: bool = False):
    """Minimize ``||y - yhat||^2 + lam ||D_order yhat||_1``.

    The ADMM estimate is polished by re-solving the fit on the recovered
    difference pattern, so segments that the penalty merged are exactly flat
    (order 1) or exactly straight (order 2).
    """
    y = np.asarray(y, dtype=float)
    T = y.size
    if order not in (1, 2):
        raise DataError("order must be 1 or 2")
    if T < order + 1:
        raise DataError(f"need at least {order + 1} samples")
    if lam < 0:
        raise DataError("lam must be nonnegative")
    D = difference_operator(T, order)
    if lam == 0:
        return (y.copy(), None) if return_report else y.copy()
    problem = ProxProblem(np.eye(T), y, L1, D, lam / 2.0)
    report = linearized_admm(problem, opts)
    yhat = polish_differences(report, problem, lambda k: k, T, order, 1)
    if return_report:
        return yhat, report
    return yhat


def integrate_differences(z, T: int, order: int, block: int) -> np.ndarray:
    """A particular solution ``k`` of ``D_order k = z`` with leading blocks zero."""
    z = np.asarray(z, dtype=float).reshape(T - order, block)
    k = np.zeros((T, block))
    if order == 1:
        k[1:] = np.cumsum(z, axis=0)
    elif order == 2:
        for t in range(T - 2):
            k[t + 2] = z[t] + 2 * k[t + 1] - k[t]
    else:
        raise DataError("only orders 1 and 2 are supported")
    return k.ravel()


def difference_nullspace(T: int, order: int, block: int) -> np.ndarray:
    """Basis of ``null(D_order)``: polynomials of degree < order in t, per component."""
    t = np.arange(T, dtype=float)
    cols = []
    for p in range(order):
        basis = t ** p
        basis = basis / np.linalg.norm(basis)
        cols.append(np.kron(basis[:, None], np.eye(block)))
    return np.hstack(cols)


def polish_differences(report: ADMMReport, problem: ProxProblem, regress, T: int,
                       order: int, block: int) -> np.ndarray:
    """Return ``argmin f(k) s.t. D k = z`` for the ADMM split variable ``z``.

    This never increases the objective relative to any ``k`` consistent with
    ``z``; the result is kept only when it does not increase the objective of
    the raw iterate.
    """
    f = problem.quadratic()
    kp = integrate_differences(report.z, T, order, block)
    N = difference_nullspace(T, order, block)
    A = problem.regressors
    if isinstance(A, BlockDiagonal):
        AN = np.vstack([A.matvec(N[:, j]) for j in range(N.shape[1])]).T
        resid = problem.targets - A.matvec(kp)
    else:
        AN = A @ N
        resid = problem.targets - A @ kp
    c = np.linalg.lstsq(AN, resid, rcond=None)[0]
    polished = kp + N @ c
    raw = report.solution
    if problem.objective(polished) <= problem.objective(raw) + 1e-6 * max(1.0, abs(problem.objective(raw))):
        return polished
    return raw
