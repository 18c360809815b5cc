"""LPV spectral decomposition: Fourier coefficients that vary with a scheduling variable.

The model is ``y(x) = Re sum_w k_w' phi(v) e^{-i w x}`` where ``phi(v)`` are
normalized Gaussian basis-function activations. Real-valued regressor
columns are ordered frequency-major, basis-minor: all ``phi_j cos(w x)``
columns, then all ``phi_j sin(w x)`` columns, so that the real solution
``[k_re; k_im]`` gives ``k = k_re + i k_im``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from .errors import DataError, NotPositiveDefinite, PhaseUndefined
from .numeric import solve_ls, solve_ridge
from .prox import GROUP_L2, L1, ADMMOptions, ProxProblem, linearized_admm

NONE, RIDGE, LASSO, GROUP = "none", "ridge", "l1", "group_l2"
#: activations below this (unnormalized) sum fall back to the nearest center
UNDERFLOW = 1e-300
#: amplitudes below this make the phase undefined
PHASE_TOL = 1e-12


@dataclass(frozen=True)
class BasisFunctionExpansion:
    centers: np.ndarray
    widths: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.centers, dtype=float))
        w = np.broadcast_to(np.asarray(self.widths, dtype=float), c.shape).copy()
        if c.size < 1:
            raise DataError("need at least one basis function")
        if np.any(w <= 0):
            raise DataError("basis widths must be positive")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "widths", w)

    @property
    def J(self) -> int:
        return self.centers.size

    @classmethod
    def uniform(cls, v, J: int, normalized: bool = True) -> "BasisFunctionExpansion":
        """``J`` evenly spaced centers over ``[min v, max v]``, width = center spacing."""
        v = np.asarray(v, dtype=float)
        lo, hi = float(np.min(v)), float(np.max(v))
        if J == 1:
            return cls(np.array([(lo + hi) / 2]), np.array([max(hi - lo, 1.0)]), normalized)
        centers = np.linspace(lo, hi, J)
        spacing = centers[1] - centers[0]
        if spacing <= 0:
            spacing = 1.0
        return cls(centers, np.full(J, spacing), normalized)


def bfe_activations(bfe: BasisFunctionExpansion, v) -> np.ndarray:
    """Gaussian activations ``exp(-(v - mu_j)^2 / (2 sigma_j^2))``.

    Returns shape (J,) for scalar ``v`` and (N, J) otherwise. When normalized,
    rows sum to one; a row whose raw activations all underflow becomes a
    one-hot vector at the nearest center.
    """
    scalar = np.ndim(v) == 0
    v = np.atleast_1d(np.asarray(v, dtype=float))
    d = v[:, None] - bfe.centers[None, :]
    act = np.exp(-0.5 * (d / bfe.widths) ** 2)
    if bfe.normalized:
        s = act.sum(axis=1)
        low = s < UNDERFLOW
        if np.any(low):
            act[low] = 0.0
            act[low, np.argmin(np.abs(d[low]), axis=1)] = 1.0
            s = act.sum(axis=1)
        act = act / s[:, None]
    return act[0] if scalar else act


@dataclass(frozen=True)
class ScheduledSignal:
    """Samples ``y`` at locations ``x`` (any order or spacing) with scheduling values ``v``."""

    x: np.ndarray
    v: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        arrs = [np.ravel(np.asarray(a, dtype=float)) for a in (self.x, self.v, self.y)]
        if len({a.size for a in arrs}) != 1:
            raise DataError("x, v and y must have equal lengths")
        if not all(np.all(np.isfinite(a)) for a in arrs):
            raise DataError("signal contains non-finite values")
        for name, a in zip(("x", "v", "y"), arrs):
            object.__setattr__(self, name, a)

    @property
    def N(self) -> int:
        return self.x.size


def build_regressor(signal: ScheduledSignal, omega, bfe: BasisFunctionExpansion) -> np.ndarray:
    """Real regressor (N x 2OJ): ``phi_j cos(w x)`` blocks, then ``phi_j sin(w x)`` blocks."""
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    phi = bfe_activations(bfe, signal.v)  # (N, J)
    wx = signal.x[:, None] * omega[None, :]  # (N, O)
    N = signal.N
    re = (np.cos(wx)[:, :, None] * phi[:, None, :]).reshape(N, -1)
    im = (np.sin(wx)[:, :, None] * phi[:, None, :]).reshape(N, -1)
    return np.hstack([re, im])


def frequency_groups(O: int, J: int) -> list:
    """Index sets of the 2J real unknowns that belong to each frequency."""
    return [np.concatenate([np.arange(o * J, (o + 1) * J),
                            O * J + np.arange(o * J, (o + 1) * J)]) for o in range(O)]


@dataclass
class SpectralEstimate:
    omega: np.ndarray
    coeffs: np.ndarray  # complex (O, J)
    bfe: BasisFunctionExpansion
    sigma2: float
    Sigma: Optional[np.ndarray] = field(default=None, repr=False)  # (2OJ, 2OJ)
    regularizer: str = NONE
    lam: float = 0.0

    @property
    def stacked(self) -> np.ndarray:
        """Real parameter vector ``[k_re; k_im]``."""
        return np.concatenate([self.coeffs.real.ravel(), self.coeffs.imag.ravel()])


def spectral_lambda_max(signal: ScheduledSignal, omega, bfe, regularizer: str = GROUP) -> float:
    """Smallest ``lam`` for which the sparse fit is identically zero."""
    A = build_regressor(signal, omega, bfe)
    g = A.T @ signal.y
    O = np.size(omega)
    if regularizer == LASSO:
        return 2.0 * float(np.max(np.abs(g)))
    return 2.0 * float(max(np.linalg.norm(g[idx]) for idx in frequency_groups(O, bfe.J)))


def fit_spectrum(signal: ScheduledSignal, omega, bfe: Optional[BasisFunctionExpansion] = None,
                 regularizer: str = NONE, lam: float = 0.0,
                 opts: Optional[ADMMOptions] = None) -> SpectralEstimate:
    """Estimate the complex coefficients ``k_{w,j}``.

    ``regularizer`` is one of ``"none"``, ``"ridge"`` (``||.||^2 + lam ||k||^2``),
    ``"l1"`` (``+ lam ||k||_1``) or ``"group_l2"`` (``+ lam sum_w ||k_w||_2``
    over the 2J real unknowns of each frequency). The covariance
    ``Sigma = sigma2 (A'A [+ lam I])^-1`` is only available for the first two.

    Raises
    ------
    RankDeficient
        For ``"none"`` on a rank-deficient regressor; use ridge instead.
    """
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    if omega.size == 0:
        raise DataError("need at least one frequency")
    bfe = bfe or BasisFunctionExpansion.uniform(signal.v, 1)
    A = build_regressor(signal, omega, bfe)
    N, P = A.shape
    O, J = omega.size, bfe.J
    dof = max(N - P, 1)
    Sigma = None
    if regularizer in (NONE, RIDGE):
        if regularizer == RIDGE and lam < 0:
            raise DataError("ridge lambda must be nonnegative")
        sigma_lam = lam if regularizer == RIDGE else 0.0
        sol = solve_ridge(A, signal.y, sigma_lam, True)
        k = sol.coefficients
        sigma2 = sol.residual_sos / dof
        Sigma = sol.param_covariance
    elif regularizer in (LASSO, GROUP):
        if not lam > 0:
            raise DataError("sparse regularizers need lam > 0")
        pen = L1 if regularizer == LASSO else GROUP_L2
        groups = frequency_groups(O, J) if pen == GROUP_L2 else None
        problem = ProxProblem(A, signal.y, pen, None, lam / 2.0, groups)
        report = linearized_admm(problem, opts)
        k = report.z  # exactly sparse; equals the iterate at convergence
        sigma2 = float(np.sum((signal.y - A @ k) ** 2)) / dof
    else:
        raise DataError(f"unknown regularizer {regularizer!r}")
    coeffs = (k[:O * J] + 1j * k[O * J:]).reshape(O, J)
    return SpectralEstimate(omega, coeffs, bfe, float(sigma2), Sigma, regularizer, float(lam))


def _combined(est: SpectralEstimate, omega_index: int, v) -> np.ndarray:
    if not 0 <= omega_index < est.omega.size:
        raise DataError(f"frequency index {omega_index} out of range")
    phi = bfe_activations(est.bfe, v)
    return phi @ est.coeffs[omega_index]


def amplitude(est: SpectralEstimate, omega_index: int, v):
    """``|k_w' phi(v)|``; scalar or array following ``v``."""
    return np.abs(_combined(est, omega_index, v))


def phase(est: SpectralEstimate, omega_index: int, v):
    """``arg(k_w' phi(v))`` in (-pi, pi].

    Raises
    ------
    PhaseUndefined
        Where the amplitude is below 1e-12.
    """
    c = _combined(est, omega_index, v)
    if np.any(np.abs(c) < PHASE_TOL):
        raise PhaseUndefined("amplitude is zero, phase undefined")
    ph = np.angle(c)
    return np.where(ph <= -np.pi, ph + 2 * np.pi, ph)


def power_spectrum(est: SpectralEstimate) -> np.ndarray:
    """``P(w) = |sum_j k_{w,j}|^2``."""
    return np.abs(est.coeffs.sum(axis=1)) ** 2


# ---------------------------------------------------------------------------
# complex normal sampling


def complex_normal_params(Sigma):
    """Covariance ``Gamma`` and relation ``C`` of ``z = z_re + i z_im`` with
    ``cov([z_re; z_im]) = Sigma``."""
    Sigma = np.asarray(Sigma, dtype=float)
    D = Sigma.shape[0] // 2
    Srr, Sri = Sigma[:D, :D], Sigma[:D, D:]
    Sir, Sii = Sigma[D:, :D], Sigma[D:, D:]
    Gamma = Srr + Sii + 1j * (Sir - Sri)
    C = Srr - Sii + 1j * (Sir + Sri)
    return Gamma, C


def psd_factor(Sigma) -> np.ndarray:
    """Lower factor ``L`` with ``L L' = Sigma`` (jittered Cholesky, eigen fallback)."""
    Sigma = 0.5 * (np.asarray(Sigma, dtype=float) + np.asarray(Sigma, dtype=float).T)
    dim = Sigma.shape[0]
    tr = np.trace(Sigma)
    if tr == 0:
        if np.any(Sigma != 0):
            raise NotPositiveDefinite("covariance has zero trace but nonzero entries")
        return np.zeros_like(Sigma)
    jitter = 1e-12 * tr / dim
    try:
        return linalg.cholesky(Sigma + jitter * np.eye(dim), lower=True)
    except linalg.LinAlgError:
        w, V = np.linalg.eigh(Sigma)
        if w.min() < -1e-8 * max(w.max(), 0):
            raise NotPositiveDefinite("covariance is indefinite") from None
        return V * np.sqrt(np.clip(w, 0, None))


def sample_complex_normal(mean, Sigma, n_samples: int, seed: int = 0) -> np.ndarray:
    """Draw ``n_samples`` complex vectors with real/imag covariance ``Sigma`` (2D x 2D)."""
    mean = np.asarray(mean)
    D = mean.size
    L = psd_factor(Sigma)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 7])))
    g = rng.standard_normal((n_samples, 2 * D))
    s = g @ L.T
    return mean.ravel()[None, :] + s[:, :D] + 1j * s[:, D:]


def sample_coefficients(est: SpectralEstimate, n_samples: int, seed: int = 0) -> np.ndarray:
    """Posterior draws of the coefficient matrix, shape (n_samples, O, J)."""
    if est.Sigma is None:
        raise DataError("covariance unavailable for sparse fits")
    z = sample_complex_normal(est.coeffs.ravel(), est.Sigma, n_samples, seed)
    return z.reshape((n_samples,) + est.coeffs.shape)


@dataclass
class Bands:
    v: np.ndarray
    amplitude: np.ndarray
    amplitude_lo: np.ndarray
    amplitude_hi: np.ndarray
    phase: np.ndarray
    phase_lo: np.ndarray
    phase_hi: np.ndarray


def confidence_bands(est: SpectralEstimate, omega_index: int, v_grid, level: float = 0.95,
                     n_mc: int = 2000, seed: int = 0) -> Bands:
    """Monte-Carlo percentile bands of amplitude and phase over ``v_grid``.

    Phase samples are wrapped to within pi of the point estimate before the
    percentiles are taken; the bands may therefore extend past +-pi.
    """
    if not 0 < level < 1:
        raise DataError("level must lie in (0, 1)")
    v_grid = np.atleast_1d(np.asarray(v_grid, dtype=float))
    phi = bfe_activations(est.bfe, v_grid)  # (G, J)
    point = phi @ est.coeffs[omega_index]
    draws = sample_coefficients(est, n_mc, seed)[:, omega_index, :]  # (n, J)
    vals = draws @ phi.T  # (n, G)
    q = [(1 - level) / 2 * 100, (1 - (1 - level) / 2) * 100]
    amp = np.abs(vals)
    a_lo, a_hi = np.percentile(amp, q, axis=0)
    ph0 = np.angle(point)
    dph = np.angle(vals * np.exp(-1j * ph0)[None, :])
    p_lo, p_hi = np.percentile(dph, q, axis=0)
    return Bands(v_grid, np.abs(point), a_lo, a_hi, ph0, ph0 + p_lo, ph0 + p_hi)


# ---------------------------------------------------------------------------
# demonstration signal

DEMO_OMEGA = np.array([4 * np.pi, 20 * np.pi, 100 * np.pi])


def demo_amplitudes(v) -> np.ndarray:
    """True amplitude functions (3, len(v)) of the scheduled test signal."""
    v = np.asarray(v, dtype=float)
    return np.vstack([2 * v ** 2, 2 / (5 * v + 1), 3 * np.exp(-10 * (v - 0.5) ** 2)])


def demo_signal(N: int = 500, noise_std: float = 0.1, seed: int = 0) -> ScheduledSignal:
    """Three-frequency signal with scheduled amplitude ``A`` and phase ``A/2``."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 11])))
    x = np.sort(rng.uniform(0, 10, N))
    v = np.linspace(0, 1, N)
    A = demo_amplitudes(v)
    y = np.sum(A * np.cos(DEMO_OMEGA[:, None] * x[None, :] - 0.5 * A), axis=0)
    y = y + noise_std * rng.standard_normal(N)
    return ScheduledSignal(x, v, y)


def decoy_grid(n_decoys: int = 12) -> np.ndarray:
    """The three test frequencies followed by evenly spaced decoys in (2pi, 120pi)."""
    decoys = 2 * np.pi * np.linspace(1.0, 60.0, n_decoys)
    return np.concatenate([DEMO_OMEGA, decoys])


def single_frequency_signal(N: int, alpha, beta, bfe: BasisFunctionExpansion,
                            noise_std: float = 1.0, x_max: float = 20.0,
                            seed: int = 0) -> ScheduledSignal:
    """``y = (alpha' phi(v)) cos x + (beta' phi(v)) sin x + e`` at uniform random ``x`` and ``v``."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(N), 13])))
    x = rng.uniform(0, x_max, N)
    v = rng.uniform(0, 1, N)
    P = bfe_activations(bfe, v)
    y = (P @ np.asarray(alpha)) * np.cos(x) + (P @ np.asarray(beta)) * np.sin(x)
    return ScheduledSignal(x, v, y + noise_std * rng.standard_normal(N))
