"""Kalman filtering, RTS smoothing, prior fusion and a bootstrap particle filter."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg

from .errors import (DataError, DegenerateWeights, SingularInnovation,
                     SingularPredictedCov, SingularSum)

LOG_2PI = np.log(2 * np.pi)

#: a prior function maps a time index to ``(mu0, Sigma0)`` or ``None`` (no prior at that step)
PriorFunction = Callable[[int], Optional[tuple]]


def _sym(P):
    return 0.5 * (P + P.T)


def _per_step(M, T, name):
    """Return a callable ``t -> matrix`` for a constant or per-step stack."""
    if M is None:
        return lambda t: None
    M = np.asarray(M, dtype=float)
    if M.ndim == 2:
        return lambda t: M
    if M.ndim == 3:
        if T is not None and M.shape[0] < T:
            raise DataError(f"{name} has {M.shape[0]} steps, need {T}")
        return lambda t: M[t]
    raise DataError(f"{name} must be a matrix or a stack of matrices")


@dataclass
class LinearGaussianModel:
    """``x_{t+1} = A_t x_t + B_t u_t + v_t``, ``y_t = C_t x_t + e_t``.

    ``A``, ``B``, ``C``, ``R1`` and ``R2`` may be single matrices or stacks
    indexed by time along the first axis. ``R1`` may be singular.
    """

    A: np.ndarray
    C: np.ndarray
    R1: np.ndarray
    R2: np.ndarray
    x0: np.ndarray
    P0: np.ndarray
    B: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        self.P0 = np.atleast_2d(np.asarray(self.P0, dtype=float))
        n = self.x0.size
        if self.P0.shape != (n, n):
            raise DataError(f"P0 has shape {self.P0.shape}, expected {(n, n)}")
        if np.asarray(self.A).shape[-2:] != (n, n):
            raise DataError("A does not match the state dimension")
        if np.asarray(self.C).shape[-1] != n:
            raise DataError("C does not match the state dimension")

    @property
    def n(self) -> int:
        return self.x0.size

    def A_at(self, t):
        return _per_step(self.A, None, "A")(t)

    def B_at(self, t):
        return _per_step(self.B, None, "B")(t)

    def C_at(self, t):
        return _per_step(self.C, None, "C")(t)

    def R1_at(self, t):
        return _per_step(self.R1, None, "R1")(t)

    def R2_at(self, t):
        return _per_step(self.R2, None, "R2")(t)


@dataclass
class GaussianStateSequence:
    """Predicted, filtered and (optionally) smoothed moments for t = 0..T-1.

    ``predicted_*[t]`` is the estimate of ``x_t`` before the measurement at
    ``t``; ``predicted_*[0]`` is the initial distribution.
    """

    predicted_means: np.ndarray
    predicted_covs: np.ndarray
    filtered_means: np.ndarray
    filtered_covs: np.ndarray
    loglik: float
    innovations: list = field(default_factory=list, repr=False)
    innovation_covs: list = field(default_factory=list, repr=False)
    smoothed_means: Optional[np.ndarray] = None
    smoothed_covs: Optional[np.ndarray] = None

    def __len__(self):
        return self.filtered_means.shape[0]


def kf_predict(mean, cov, A, B=None, u=None, R1=None):
    """Time update ``mean+ = A mean + B u``, ``cov+ = A cov A' + R1``."""
    mean = A @ mean
    if B is not None and u is not None and np.size(u):
        mean = mean + B @ np.atleast_1d(u)
    cov = A @ cov @ A.T
    if R1 is not None:
        cov = cov + R1
    return mean, _sym(cov)


def _innovation_factor(S, exc=SingularInnovation, what="innovation covariance"):
    try:
        return linalg.cho_factor(S, lower=True, check_finite=False)
    except linalg.LinAlgError as err:
        raise exc(f"{what} is not positive definite") from err


def _gaussian_logpdf(e, cf):
    L = np.tril(cf[0])
    a = linalg.solve_triangular(L, e, lower=True, check_finite=False)
    logdet = 2 * np.sum(np.log(np.diag(L)))
    return -0.5 * (a @ a + logdet + e.size * LOG_2PI), float(a @ a), float(logdet)


def _measurement_update(mean, cov, C, y, R2, joseph=False, exc=SingularInnovation):
    C = np.atleast_2d(C)
    y = np.atleast_1d(y)
    e = y - C @ mean
    PCt = cov @ C.T
    S = _sym(C @ PCt + R2)
    cf = _innovation_factor(S, exc)
    K = linalg.cho_solve(cf, PCt.T, check_finite=False).T
    mean = mean + K @ e
    if joseph:
        IKC = np.eye(cov.shape[0]) - K @ C
        cov = IKC @ cov @ IKC.T + K @ R2 @ K.T
    else:
        cov = cov - K @ PCt.T
    return mean, _sym(cov), e, S, cf


def kf_update(mean, cov, C, y, R2, joseph: bool = False):
    """Measurement update in gain form.

    Returns ``(mean+, cov+, innovation, S)`` where ``S = C cov C' + R2``.
    With ``joseph=True`` the covariance uses the Joseph form, which keeps it
    PSD under round-off.

    Raises
    ------
    SingularInnovation
        If ``S`` is not positive definite.
    """
    mean, cov, e, S, _ = _measurement_update(mean, cov, C, y, np.atleast_2d(R2), joseph)
    return mean, cov, e, S


def prior_update(mean, cov, mu0, Sigma0):
    """Fuse the estimate with a Gaussian prior ``N(mu0, Sigma0)`` on the same state.

    ``Sigma0=None`` means an infinitely vague prior and returns the input
    unchanged. Equivalent to :func:`kf_update` with ``C = I``, ``y = mu0``,
    ``R2 = Sigma0``.
    """
    if Sigma0 is None:
        return mean, cov
    mean, cov, _, _, _ = _measurement_update(mean, cov, np.eye(mean.size), mu0,
                                             np.atleast_2d(Sigma0), exc=SingularSum)
    return mean, cov


def _prior_step(mean, cov, prior_value):
    """Apply a prior on the leading block of the state; returns the loglik term."""
    mu0, Sigma0 = prior_value
    if Sigma0 is None:
        return mean, cov, 0.0
    mu0 = np.atleast_1d(np.asarray(mu0, dtype=float))
    d = mu0.size
    C = np.eye(d, mean.size)
    mean, cov, e, _, cf = _measurement_update(mean, cov, C, mu0, np.atleast_2d(Sigma0),
                                              exc=SingularSum)
    return mean, cov, _gaussian_logpdf(e, cf)[0]


def kalman_filter(model: LinearGaussianModel, observations, inputs=None,
                  prior: Optional[PriorFunction] = None, joseph: bool = False,
                  prior_first: bool = False) -> GaussianStateSequence:
    """Run the Kalman filter over ``observations`` (T x p).

    Rows of ``observations`` that contain NaN skip the measurement update.
    ``prior(t)`` may return ``(mu0, Sigma0)`` acting on the leading
    ``len(mu0)`` state components, or ``None``/``Sigma0=None`` to skip.
    The log-likelihood sums the Gaussian innovation densities of both the
    measurements and the prior fusions, so it does not depend on their order.
    """
    Y = np.asarray(observations, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    T = Y.shape[0]
    U = None if inputs is None else np.asarray(inputs, dtype=float)
    if U is not None and U.ndim == 1:
        U = U[:, None]
    n = model.n
    pm = np.empty((T, n))
    pc = np.empty((T, n, n))
    fm = np.empty((T, n))
    fc = np.empty((T, n, n))
    innovations, innov_covs = [], []
    loglik = 0.0
    mean, cov = model.x0.copy(), _sym(model.P0)
    for t in range(T):
        if t > 0:
            u = None if U is None else U[t - 1]
            mean, cov = kf_predict(mean, cov, model.A_at(t - 1), model.B_at(t - 1), u,
                                   model.R1_at(t - 1))
        pm[t], pc[t] = mean, cov
        pv = prior(t) if prior is not None else None

        def meas(mean, cov):
            y = Y[t]
            if np.any(np.isnan(y)):
                innovations.append(None)
                innov_covs.append(None)
                return mean, cov, 0.0
            mean, cov, e, S, cf = _measurement_update(mean, cov, model.C_at(t), y,
                                                      np.atleast_2d(model.R2_at(t)), joseph)
            innovations.append(e)
            innov_covs.append(S)
            return mean, cov, _gaussian_logpdf(e, cf)[0]

        if pv is not None and prior_first:
            mean, cov, lp = _prior_step(mean, cov, pv)
            loglik += lp
        mean, cov, lm = meas(mean, cov)
        loglik += lm
        if pv is not None and not prior_first:
            mean, cov, lp = _prior_step(mean, cov, pv)
            loglik += lp
        fm[t], fc[t] = mean, cov
    return GaussianStateSequence(pm, pc, fm, fc, float(loglik), innovations, innov_covs)


def _smoother_gain(Pp, APf, t):
    """``G = Pf A' Pp^-1``; a singular ``Pp`` (noise-free steps) falls back to the pseudo-inverse."""
    try:
        cf = linalg.cho_factor(Pp, lower=True, check_finite=False)
        return linalg.cho_solve(cf, APf, check_finite=False).T
    except linalg.LinAlgError:
        pass
    if not np.all(np.isfinite(Pp)):
        raise SingularPredictedCov(f"predicted covariance at {t} is not finite")
    G = np.linalg.lstsq(Pp, APf, rcond=1e-12)[0].T
    if not np.all(np.isfinite(G)):
        raise SingularPredictedCov(f"predicted covariance at {t} cannot be inverted")
    return G


def rts_smooth(seq: GaussianStateSequence, model: LinearGaussianModel) -> GaussianStateSequence:
    """Rauch-Tung-Striebel backward pass; fills ``smoothed_means``/``smoothed_covs``.

    A singular predicted covariance (e.g. noise-free dynamics) is handled
    with a pseudo-inverse.

    Raises
    ------
    SingularPredictedCov
        If a one-step predicted covariance is not finite.
    """
    T = len(seq)
    sm = seq.filtered_means.copy()
    sc = seq.filtered_covs.copy()
    for t in range(T - 2, -1, -1):
        A = model.A_at(t)
        Pp = seq.predicted_covs[t + 1]
        G = _smoother_gain(Pp, A @ seq.filtered_covs[t], t + 1)
        sm[t] = seq.filtered_means[t] + G @ (sm[t + 1] - seq.predicted_means[t + 1])
        sc[t] = _sym(seq.filtered_covs[t] + G @ (sc[t + 1] - Pp) @ G.T)
    seq.smoothed_means = sm
    seq.smoothed_covs = sc
    return seq


# ---------------------------------------------------------------------------
# particle filter


@dataclass
class ParticleFilterResult:
    particles: np.ndarray  # (T, N, d) weighted cloud before resampling
    weights: np.ndarray  # (T, N), each row sums to one
    means: np.ndarray  # (T, d)
    loglik: float
    resampled: np.ndarray = field(repr=False, default=None)  # (T,) flags


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Counter-based generator for a given (seed, step) pair."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, step])))


def systematic_resample(weights, u: float) -> np.ndarray:
    """Indices drawn by systematic resampling with a single uniform ``u`` in [0, 1)."""
    N = weights.size
    positions = (u + np.arange(N)) / N
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, positions, side="right")


def particle_filter(init_sampler, transition_sampler, obs_loglik, observations,
                    n_particles: int, seed: int = 0,
                    ess_threshold: Optional[float] = None) -> ParticleFilterResult:
    """Bootstrap particle filter.

    Parameters
    ----------
    init_sampler : callable(rng, N) -> (N, d) array
    transition_sampler : callable(particles, t, rng) -> (N, d) array
        Propagates particles from step ``t-1`` to ``t``.
    obs_loglik : callable(particles, y, t) -> (N,) array
    observations : sequence of length T
    ess_threshold : float, optional
        When given, resample only if the effective sample size drops below
        ``ess_threshold * N``; by default resampling happens every step.

    Each step uses its own counter-based stream, so results depend only on
    ``seed``.
    """
    if n_particles < 2:
        raise DataError("need at least two particles")
    T = len(observations)
    particles = np.asarray(init_sampler(step_rng(seed, 0), n_particles), dtype=float)
    if particles.ndim == 1:
        particles = particles[:, None]
    N, d = particles.shape
    clouds = np.empty((T, N, d))
    W = np.empty((T, N))
    means = np.empty((T, d))
    flags = np.zeros(T, dtype=bool)
    logw = np.full(N, -np.log(N))
    loglik = 0.0
    for t in range(T):
        rng = step_rng(seed, t + 1)
        if t > 0:
            particles = np.asarray(transition_sampler(particles, t, rng), dtype=float)
            if particles.ndim == 1:
                particles = particles[:, None]
        ll = np.asarray(obs_loglik(particles, observations[t], t), dtype=float)
        a = logw + ll
        amax = np.max(a)
        if not np.isfinite(amax):
            raise DegenerateWeights(f"all particle likelihoods vanished at step {t}")
        w = np.exp(a - amax)
        s = w.sum()
        loglik += amax + np.log(s)
        w /= s
        clouds[t], W[t] = particles, w
        means[t] = w @ particles
        ess = 1.0 / np.sum(w ** 2)
        if ess_threshold is None or ess < ess_threshold * N:
            idx = systematic_resample(w, rng.random())
            particles = particles[idx]
            logw = np.full(N, -np.log(N))
            flags[t] = True
        else:
            logw = np.log(w)
    return ParticleFilterResult(clouds, W, means, float(loglik), flags)
