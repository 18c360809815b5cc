import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import sparse

from ltvid import (ADMMOptions, ProxProblem, difference_operator, linearized_admm,
                   prox_group_l2, prox_l1, solve_ls, trend_filter)
from ltvid.prox import GROUP_L2, L1, operator_norm


def tf_objective(y, yhat, lam, order):
    D = difference_operator(y.size, order)
    return float(np.sum((y - yhat) ** 2) + lam * np.sum(np.abs(D @ yhat)))


def test_prox_l1_soft_threshold():
    np.testing.assert_allclose(prox_l1([3.0, -0.5], 1.0), [2.0, 0.0])


def test_prox_l1_zero_threshold_is_identity():
    z = np.array([1.5, -2.0, 0.0, 1e-9])
    np.testing.assert_array_equal(prox_l1(z, 0.0), z)


def test_prox_l1_grid_oracle():
    rng = np.random.default_rng(0)
    z = rng.standard_normal(6) * 2
    t = 0.7
    w = prox_l1(z, t)
    grid = np.linspace(-6, 6, 120001)
    for zi, wi in zip(z, w):
        obj = 0.5 * (grid - zi) ** 2 + t * np.abs(grid)
        assert abs(grid[np.argmin(obj)] - wi) < 2e-4


def test_prox_group_single_group_halves():
    z = np.array([2.0, 0.0])
    np.testing.assert_allclose(prox_group_l2(z, None, 1.0), z / 2)
    z = np.array([1.2, -1.6])
    np.testing.assert_allclose(prox_group_l2(z, None, 1.0), z / 2)


def test_prox_group_small_block_zeroed():
    z = np.array([0.3, 0.4, 5.0, 0.0])
    out = prox_group_l2(z, 2, 0.5)
    np.testing.assert_array_equal(out[:2], 0.0)
    np.testing.assert_allclose(out[2:], [4.5, 0.0])


def test_prox_group_line_search_oracle():
    rng = np.random.default_rng(1)
    z = rng.standard_normal(5) * 2
    groups = [np.array([0, 1, 2]), np.array([3, 4])]
    t = 0.8
    w = prox_group_l2(z, groups, t)
    # the minimizer of each block is a nonnegative multiple of z_g
    scales = np.linspace(0, 1, 100001)
    for g in groups:
        nz = np.linalg.norm(z[g])
        obj = 0.5 * (1 - scales) ** 2 * nz ** 2 + t * scales * nz
        best = scales[np.argmin(obj)]
        np.testing.assert_allclose(w[g], best * z[g], atol=1e-4)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 3.0))
def test_prox_maps_nonexpansive(seed, t):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 8)) * 3
    for f in (lambda v: prox_l1(v, t), lambda v: prox_group_l2(v, 2, t),
              lambda v: prox_group_l2(v, [np.arange(3), np.arange(3, 8)], t)):
        pa, pb = f(a), f(b)
        assert np.linalg.norm(pa - pb) <= np.linalg.norm(a - b) + 1e-12
        # firm nonexpansiveness
        assert np.sum((pa - pb) ** 2) <= np.dot(pa - pb, a - b) + 1e-12


def test_difference_operator():
    D1 = difference_operator(4, 1).toarray()
    np.testing.assert_array_equal(D1[0], [-1, 1, 0, 0])
    D2 = difference_operator(4, 2).toarray()
    np.testing.assert_array_equal(D2[1], [0, 1, -2, 1])
    Db = difference_operator(3, 1, block=2).toarray()
    assert Db.shape == (4, 6)
    np.testing.assert_array_equal(Db[1], [0, -1, 0, 1, 0, 0])


def test_operator_norm_power_iteration():
    D = difference_operator(30, 1)
    ref = np.linalg.norm(D.toarray(), 2)
    assert operator_norm(D) == pytest.approx(ref, rel=1e-2)
    assert operator_norm(D) <= ref * (1 + 1e-12)


def test_admm_lambda_zero_is_least_squares():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((20, 4))
    y = rng.standard_normal(20)
    rep = linearized_admm(ProxProblem(A, y, L1, None, 0.0))
    np.testing.assert_allclose(rep.solution, solve_ls(A, y).coefficients, atol=1e-6)
    assert rep.converged


def lasso_enumeration(A, y, lam):
    """Exact lasso minimum by enumerating sign patterns and solving each in closed form."""
    K = A.shape[1]
    best = np.inf
    for signs in itertools.product((-1, 0, 1), repeat=K):
        s = np.array(signs, dtype=float)
        act = s != 0
        k = np.zeros(K)
        if act.any():
            As = A[:, act]
            k[act] = np.linalg.solve(As.T @ As, As.T @ y - lam * s[act])
            if np.any(np.sign(k[act]) != s[act]):
                continue
        best = min(best, 0.5 * np.sum((y - A @ k) ** 2) + lam * np.sum(np.abs(k)))
    return best


@pytest.mark.parametrize("seed", range(5))
def test_admm_matches_active_set_enumeration(seed):
    rng = np.random.default_rng(seed)
    K = 4
    A = rng.standard_normal((12, K))
    y = A @ np.array([1.5, 0.0, -0.8, 0.0]) + 0.3 * rng.standard_normal(12)
    lam = 1.5
    ref = lasso_enumeration(A, y, lam)
    # singleton groups make the group penalty coincide with the L1 penalty
    for pen, groups in ((L1, None), (GROUP_L2, 1)):
        prob = ProxProblem(A, y, pen, None, lam, groups)
        rep = linearized_admm(prob)
        assert rep.converged
        assert prob.objective(rep.solution) == pytest.approx(ref, abs=1e-6)


def test_admm_group_lasso_kkt():
    rng = np.random.default_rng(7)
    A = rng.standard_normal((30, 6))
    y = A @ np.array([1.0, -1.0, 0, 0, 0.5, 0.2]) + 0.1 * rng.standard_normal(30)
    D = difference_operator(6, 1)
    prob = ProxProblem(A, y, GROUP_L2, D, 2.0, 1)
    rep = linearized_admm(prob)
    assert rep.converged
    s = prob.project_subgradient(rep.z, rep.subgradient)
    assert prob.kkt_residual(rep.solution, s) < 1e-4


def test_admm_huge_lambda_kills_differences():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((20, 5))
    y = rng.standard_normal(20)
    D = difference_operator(5, 1)
    lam = 1e6 * np.max(np.abs(A.T @ y))
    rep = linearized_admm(ProxProblem(A, y, L1, D, lam))
    assert np.max(np.abs(D @ rep.solution)) < 1e-6


def test_trend_filter_constant_signal():
    y = np.full(20, 3.0)
    for lam in (0.1, 10.0):
        np.testing.assert_allclose(trend_filter(y, lam), y, atol=1e-10)


def test_trend_filter_zero_lambda():
    y = np.random.default_rng(4).standard_normal(15)
    np.testing.assert_array_equal(trend_filter(y, 0.0), y)


def test_trend_filter_step_single_jump_kkt():
    rng = np.random.default_rng(5)
    y = np.r_[np.zeros(30), np.ones(30)] + 0.1 * rng.standard_normal(60)
    lam = 10.0
    yhat = trend_filter(y, lam, 1)
    D = difference_operator(60, 1)
    d = D @ yhat
    assert np.count_nonzero(np.abs(d) > 1e-9) == 1
    assert np.argmax(np.abs(d)) == 29
    # stationarity 2(yhat - y) + lam D's = 0 with s in the subdifferential of |.|
    s = np.linalg.lstsq(D.T.toarray(), 2 * (y - yhat) / lam, rcond=None)[0]
    np.testing.assert_allclose(D.T @ s, 2 * (y - yhat) / lam, atol=1e-8)
    nz = np.abs(d) > 1e-9
    np.testing.assert_allclose(s[nz], np.sign(d[nz]), atol=1e-5)
    assert np.max(np.abs(s[~nz])) <= 1 + 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 50.0), st.sampled_from([1, 2]))
def test_trend_filter_beats_raw_and_mean(seed, lam, order):
    y = np.random.default_rng(seed).standard_normal(25)
    yhat = trend_filter(y, lam, order)
    obj = tf_objective(y, yhat, lam, order)
    assert obj <= tf_objective(y, y, lam, order) + 1e-8
    assert obj <= tf_objective(y, np.full_like(y, y.mean()), lam, order) + 1e-8


def admm_test_problems():
    rng = np.random.default_rng(11)
    probs = []
    for i in range(4):
        A = rng.standard_normal((30, 8))
        y = A @ np.r_[np.ones(4), -np.ones(4)] + 0.2 * rng.standard_normal(30)
        probs.append(ProxProblem(A, y, GROUP_L2, difference_operator(8, 1), 1.0 + i, 1))
        probs.append(ProxProblem(A, y, L1, None, 0.5 + i))
    for i in range(3):
        y = np.r_[np.zeros(20), 2 * np.ones(20)] + 0.3 * rng.standard_normal(40)
        probs.append(ProxProblem(np.eye(40), y, L1, difference_operator(40, 1), 1.0 + i))
    return probs


@pytest.mark.parametrize("idx", range(11))
def test_admm_objective_monotone_after_transient(idx):
    prob = admm_test_problems()[idx]
    rep = linearized_admm(prob, ADMMOptions())
    trace = rep.objective_trace[10:]
    rises = np.diff(trace) - 1e-9 * np.maximum(1.0, np.abs(trace[:-1]))
    if np.any(rises > 0):
        i = int(np.argmax(rises))
        pytest.fail(f"objective rose by {rises[i]:.3g} at iteration {i + 11}")


def test_admm_deterministic():
    prob = admm_test_problems()[0]
    a = linearized_admm(prob).solution
    b = linearized_admm(prob).solution
    np.testing.assert_array_equal(a, b)


def test_admm_max_iterations_reports_unconverged():
    prob = admm_test_problems()[0]
    rep = linearized_admm(prob, ADMMOptions(max_iter=3))
    assert not rep.converged
    assert rep.iterations == 3
    assert np.all(np.isfinite(rep.solution))


def test_prox_problem_validates_groups():
    from ltvid import DataError
    with pytest.raises(DataError):
        ProxProblem(np.eye(3), np.ones(3), GROUP_L2, None, 1.0, [np.array([0, 1])])
    with pytest.raises(DataError):
        ProxProblem(np.eye(3), np.ones(3), L1, sparse.identity(4), 1.0)
