import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ltvid import (InsufficientExcitation, RankDeficient, Trajectory, DataError,
                   fit_lti, matrices_to_params, params_to_matrices, solve_ls, solve_ridge)
from ltvid.simulators import SimSpec, gen_jump_linear


def simulate(A, B, U, x0, noise=None):
    T = U.shape[0]
    x = np.zeros((T, A.shape[0]))
    x[0] = x0
    for t in range(T - 1):
        x[t + 1] = A @ x[t] + B @ U[t] + (0 if noise is None else noise[t])
    return Trajectory(x, U)


def test_solve_ls_identity():
    sol = solve_ls(np.eye(2), [1.0, 2.0])
    np.testing.assert_allclose(sol.coefficients, [1, 2])
    assert sol.residual_sos == pytest.approx(0)


def test_solve_ls_sample_mean():
    sol = solve_ls(np.ones((2, 1)), [1.0, 3.0])
    assert sol.coefficients[0] == pytest.approx(2.0)
    assert sol.residual_sos == pytest.approx(2.0)


def test_solve_ls_recovers_planted_coefficients():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((50, 3))
    k = np.array([1.5, -2.0, 0.25])
    sol = solve_ls(A, A @ k)
    assert np.linalg.norm(sol.coefficients - k) / np.linalg.norm(k) < 1e-10


def test_solve_ls_rank_deficient():
    A = np.ones((5, 2))
    with pytest.raises(RankDeficient):
        solve_ls(A, np.arange(5.0))
    with pytest.raises(RankDeficient):
        solve_ls(np.ones((1, 2)), [1.0])


def test_solve_ls_covariance():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((30, 4))
    y = rng.standard_normal(30)
    sol = solve_ls(A, y, covariance=True)
    s2 = sol.residual_sos / 26
    np.testing.assert_allclose(sol.param_covariance, s2 * np.linalg.inv(A.T @ A), rtol=1e-10)
    assert np.allclose(sol.param_covariance, sol.param_covariance.T)
    assert np.linalg.eigvalsh(sol.param_covariance).min() > 0


def test_solve_ridge_zero_lambda_is_ols():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((20, 5))
    y = rng.standard_normal(20)
    np.testing.assert_allclose(solve_ridge(A, y, 0.0).coefficients, solve_ls(A, y).coefficients)


def test_solve_ridge_scalar():
    assert solve_ridge(np.ones((1, 1)), [1.0], 1.0).coefficients[0] == pytest.approx(0.5)


def test_solve_ridge_matches_normal_equations():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((20, 5))
    y = rng.standard_normal(20)
    lam = 0.7
    ref = np.linalg.solve(A.T @ A + lam * np.eye(5), A.T @ y)
    got = solve_ridge(A, y, lam).coefficients
    assert np.linalg.norm(got - ref) / np.linalg.norm(ref) < 1e-10


def test_solve_ridge_rejects_negative():
    with pytest.raises(DataError):
        solve_ridge(np.eye(2), [1.0, 1.0], -1.0)


def test_fit_lti_noiseless_recovery():
    rng = np.random.default_rng(4)
    A = np.array([[0.9, 0.2], [-0.1, 0.8]])
    B = np.array([[0.5], [1.0]])
    traj = simulate(A, B, rng.standard_normal((40, 1)), [1.0, -1.0])
    mdl = fit_lti(traj)
    np.testing.assert_allclose(mdl.A, A, atol=1e-8)
    np.testing.assert_allclose(mdl.B, B, atol=1e-8)


def test_fit_lti_constant_state_needs_ridge():
    traj = Trajectory(np.ones((10, 1)), np.zeros((10, 1)))
    with pytest.raises(InsufficientExcitation):
        fit_lti(traj)
    mdl = fit_lti(traj, ridge_lambda=1e-9)
    assert mdl.A[0, 0] == pytest.approx(1.0, abs=1e-6)
    assert mdl.B[0, 0] == pytest.approx(0.0)


def test_fit_lti_worse_than_ltv_on_jump_data():
    from ltvid import fit_sparse
    sim = gen_jump_linear(SimSpec(seed=0))
    lti = fit_lti(sim.traj)
    ltv = fit_sparse(sim.traj, 20.0)
    lti_res = np.sum((sim.traj.targets() - sim.traj.regressors() @ np.hstack([lti.A, lti.B]).T) ** 2)
    ltv_res = np.sum(ltv.prediction_errors(sim.traj) ** 2)
    assert lti_res > ltv_res


def test_param_roundtrip():
    rng = np.random.default_rng(5)
    A = rng.standard_normal((3, 3))
    B = rng.standard_normal((3, 2))
    k = matrices_to_params(A, B)
    np.testing.assert_array_equal(k[:5], np.r_[A[0], B[0]])
    A2, B2 = params_to_matrices(k, 3, 2)
    np.testing.assert_array_equal(A2, A)
    np.testing.assert_array_equal(B2, B)


def test_trajectory_validation():
    with pytest.raises(DataError):
        Trajectory(np.zeros((1, 2)), np.zeros((1, 1)))
    with pytest.raises(DataError):
        Trajectory(np.zeros((3, 2)), np.zeros((4, 1)))
    with pytest.raises(DataError):
        Trajectory(np.array([[0.0], [np.nan]]), np.zeros((2, 1)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(5, 40), st.integers(1, 5))
def test_ls_residual_orthogonal(seed, N, K):
    rng = np.random.default_rng(seed)
    K = min(K, N)
    A = rng.standard_normal((N, K))
    y = rng.standard_normal(N)
    sol = solve_ls(A, y)
    r = y - A @ sol.coefficients
    assert np.max(np.abs(A.T @ r)) < 1e-8 * max(np.max(np.abs(A.T @ y)), 1e-300)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_ridge_norm_nonincreasing(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((15, 6))
    y = rng.standard_normal(15)
    norms = [np.linalg.norm(solve_ridge(A, y, lam).coefficients)
             for lam in [0.0, 1e-3, 0.1, 1.0, 10.0, 1e3]]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(norms, norms[1:]))


def test_fit_lti_consistency():
    A = np.array([[0.8, 0.1], [0.0, 0.7]])
    B = np.array([[1.0], [0.5]])

    def mean_err(T):
        errs = []
        for seed in range(20):
            rng = np.random.default_rng([seed, T])
            traj = simulate(A, B, rng.standard_normal((T, 1)), np.zeros(2),
                            0.5 * rng.standard_normal((T, 2)))
            mdl = fit_lti(traj)
            errs.append(np.linalg.norm(np.hstack([mdl.A - A, mdl.B - B])))
        return np.mean(errs)

    e1, e4 = mean_err(100), mean_err(400)
    # error scales as T^-1/2: quadrupling T halves it, with 50% slack
    assert 0.25 <= e4 / e1 <= 0.75
