"""Penalized solvers against brute-force references."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from _oracles import ols, pooled_objective, split_lasso
from transfarm.numerics import RngStream
from transfarm.solver import (
    LassoProblem,
    cv_lambda,
    lasso_fit,
    nodewise_precision,
    penalty_level,
    scaled_lasso,
)


def sparse_instance(n, p, s, seed, noise=1.0, beta_value=1.0):
    gen = np.random.default_rng(seed)
    z = gen.standard_normal((n, p))
    beta = np.zeros(p)
    beta[:s] = beta_value
    r = z @ beta + noise * gen.standard_normal(n)
    return z, r, beta


# ----------------------------------------------------------------------
# lasso_fit
# ----------------------------------------------------------------------


def test_full_shrinkage_returns_exact_zero():
    z, r, _ = sparse_instance(30, 6, 2, 0)
    lam_max = float(np.max(np.abs(z.T @ r))) / 30
    sol = lasso_fit(LassoProblem([(z, r)], lam=lam_max * 1.0001))
    assert np.array_equal(sol.coef, np.zeros(6))
    assert sol.converged


def test_zero_penalty_matches_normal_equations():
    z, r, _ = sparse_instance(60, 8, 3, 1)
    sol = lasso_fit(LassoProblem([(z, r)], lam=0.0))
    assert_allclose(sol.coef, ols(z, r), atol=1e-6)


def test_matches_projected_gradient_reference():
    z, r, _ = sparse_instance(20, 3, 2, 2, noise=0.5)
    sol = lasso_fit(LassoProblem([(z, r)], lam=0.1), tol=1e-10)
    ref = split_lasso([(z, r)], 0.1)
    assert_allclose(sol.coef, ref, atol=1e-5)
    assert abs(sol.objective - pooled_objective([(z, r)], ref, 0.1)) < 1e-9


def test_pooled_blocks_match_projected_gradient():
    z1, r1, _ = sparse_instance(15, 4, 2, 3, noise=0.3)
    z2, r2, _ = sparse_instance(25, 4, 2, 4, noise=0.3)
    blocks = [(z1, r1), (z2, r2)]
    sol = lasso_fit(LassoProblem(blocks, lam=0.05), tol=1e-10)
    assert_allclose(sol.coef, split_lasso(blocks, 0.05), atol=1e-5)


def test_offset_matches_projected_gradient():
    z, r, _ = sparse_instance(30, 5, 2, 5, noise=0.4)
    offset = np.array([0.5, -0.2, 0.0, 0.1, 0.0])
    sol = lasso_fit(LassoProblem([(z, r)], lam=0.08, offset=offset), tol=1e-10)
    assert_allclose(sol.coef, split_lasso([(z, r)], 0.08, offset=offset), atol=1e-5)


def test_offset_equals_shifted_response():
    z, r, _ = sparse_instance(25, 4, 2, 6)
    offset = np.array([0.3, 0.0, -0.4, 0.0])
    with_offset = lasso_fit(LassoProblem([(z, r)], lam=0.07, offset=offset))
    shifted = lasso_fit(LassoProblem([(z, r - z @ offset)], lam=0.07))
    assert_allclose(with_offset.coef, shifted.coef, atol=1e-9)


def test_objective_non_increasing_across_sweeps():
    z, r, _ = sparse_instance(40, 10, 4, 7, noise=0.8)
    problem = LassoProblem([(z, r)], lam=0.02)
    objectives = [lasso_fit(problem, max_iter=k).objective for k in range(1, 9)]
    for before, after in zip(objectives, objectives[1:]):
        assert after <= before + 1e-12


def test_warm_start_changes_iterations_not_solution():
    worst = 0.0
    for seed in range(20):
        z, r, _ = sparse_instance(35, 8, 3, 100 + seed, noise=0.6)
        problem = LassoProblem([(z, r)], lam=0.05)
        cold = lasso_fit(problem, tol=1e-10)
        warm = lasso_fit(problem, tol=1e-10, warm_start=cold.coef + 0.01)
        worst = max(worst, float(np.max(np.abs(cold.coef - warm.coef))))
        assert warm.converged
    assert worst < 1e-6


def test_block_permutation_invariance():
    rng = np.random.default_rng(9)
    blocks = []
    for _ in range(3):
        z = rng.standard_normal((12, 5))
        blocks.append((z, rng.standard_normal(12)))
    forward = lasso_fit(LassoProblem(blocks, lam=0.04))
    backward = lasso_fit(LassoProblem(blocks[::-1], lam=0.04))
    assert_allclose(forward.coef, backward.coef, atol=1e-10)


def test_kkt_violation_reported_on_convergence():
    z, r, _ = sparse_instance(50, 12, 4, 8)
    sol = lasso_fit(LassoProblem([(z, r)], lam=0.03), tol=1e-8)
    scale = math.sqrt(float(r @ r) / 50)
    assert sol.converged
    assert sol.kkt_violation <= 1e-8 * scale


def test_iteration_cap_flags_not_raises():
    z, r, _ = sparse_instance(40, 15, 5, 10, noise=0.1)
    sol = lasso_fit(LassoProblem([(z, r)], lam=1e-6), max_iter=1)
    assert not sol.converged
    assert sol.iterations == 1


def test_problem_validation():
    z = np.ones((4, 2))
    with pytest.raises(ValueError):
        LassoProblem([], lam=0.1)
    with pytest.raises(ValueError):
        LassoProblem([(z, np.ones(3))], lam=0.1)
    with pytest.raises(ValueError):
        LassoProblem([(z, np.ones(4)), (np.ones((4, 3)), np.ones(4))], lam=0.1)
    with pytest.raises(ValueError):
        LassoProblem([(z, np.ones(4))], lam=-0.5)
    with pytest.raises(ValueError):
        LassoProblem([(z, np.ones(4))], lam=0.1, offset=np.ones(3))


def test_penalty_level_formula():
    expected = 0.5 * 2.0 * math.sqrt(2.0 * math.log(100) / 400)
    assert penalty_level(2.0, 100, 400) == expected
    with pytest.raises(ValueError):
        penalty_level(-1.0, 10, 10)


# ----------------------------------------------------------------------
# scaled lasso
# ----------------------------------------------------------------------


def test_scaled_lasso_noiseless_recovery():
    z, r, _ = sparse_instance(200, 10, 3, 11, noise=0.0)
    fit = scaled_lasso(z, r)
    assert fit.sigma <= 0.05


def test_scaled_lasso_pure_noise_level():
    inside = 0
    for seed in range(50):
        gen = np.random.default_rng(2000 + seed)
        z = gen.standard_normal((500, 50))
        r = gen.standard_normal(500)
        fit = scaled_lasso(z, r)
        if 0.85 <= fit.sigma <= 1.15:
            inside += 1
    assert inside == 50


def test_scaled_lasso_exact_homogeneity():
    z, r, _ = sparse_instance(80, 20, 5, 12, noise=0.7)
    base = scaled_lasso(z, r)
    quadrupled = scaled_lasso(z, 4.0 * r)
    # powers of two rescale every float op exactly, so the iterate path
    # and the alternation count are identical
    assert quadrupled.sigma == 4.0 * base.sigma
    assert np.array_equal(quadrupled.coef, 4.0 * base.coef)
    assert quadrupled.alternations == base.alternations
    general = scaled_lasso(z, 3.0 * r)
    assert abs(general.sigma - 3.0 * base.sigma) < 1e-10 * base.sigma


def test_scaled_lasso_zero_response_rejected():
    z = np.random.default_rng(0).standard_normal((20, 4))
    with pytest.raises(ValueError):
        scaled_lasso(z, np.zeros(20))


# ----------------------------------------------------------------------
# nodewise precision
# ----------------------------------------------------------------------


def test_nodewise_orthogonal_design_is_diagonal():
    gen = np.random.default_rng(13)
    q, _ = np.linalg.qr(gen.standard_normal((50, 5)))
    u = q * np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    est = nodewise_precision(u, lambda_node=0.0)
    expected = np.diag(50.0 / np.sum(u * u, axis=0))
    assert_allclose(est.theta, expected, atol=1e-8)


def test_nodewise_zero_penalty_matches_inverse():
    gen = np.random.default_rng(14)
    u = gen.standard_normal((200, 5)) @ np.linalg.cholesky(
        np.array(
            [
                [1.0, 0.3, 0.1, 0.0, 0.0],
                [0.3, 1.0, 0.3, 0.1, 0.0],
                [0.1, 0.3, 1.0, 0.3, 0.1],
                [0.0, 0.1, 0.3, 1.0, 0.3],
                [0.0, 0.0, 0.1, 0.3, 1.0],
            ]
        )
    ).T
    est = nodewise_precision(u, lambda_node=0.0, tol=1e-10)
    direct = np.linalg.inv(u.T @ u / 200)
    assert np.max(np.abs(est.theta - direct)) < 1e-5


def test_nodewise_auto_penalty_contract():
    gen = np.random.default_rng(15)
    u = gen.standard_normal((100, 8))
    est = nodewise_precision(u)
    expected_lam = 0.5 * math.sqrt(math.log(8) / 100)
    assert_allclose(est.lambdas, np.full(8, expected_lam))
    assert np.all(np.diagonal(est.theta) > 0)
    assert np.all(est.tau_sq > 0)


def test_nodewise_degenerate_column_reported():
    gen = np.random.default_rng(16)
    u = gen.standard_normal((30, 4))
    u[:, 2] = 0.0
    with pytest.raises(ValueError, match="column 2"):
        nodewise_precision(u, lambda_node=0.0)


def test_nodewise_single_column():
    u = np.linspace(1.0, 2.0, 25).reshape(-1, 1)
    est = nodewise_precision(u)
    assert_allclose(est.theta, [[25.0 / float(u.ravel() @ u.ravel())]])


# ----------------------------------------------------------------------
# cross-validated penalty
# ----------------------------------------------------------------------


def test_cv_lambda_deterministic_and_in_grid():
    z, r, _ = sparse_instance(60, 10, 3, 17, noise=0.5)
    first = cv_lambda(z, r, rng=RngStream(1))
    second = cv_lambda(z, r, rng=RngStream(1))
    assert first == second
    lam_max = float(np.max(np.abs(z.T @ r))) / 60
    assert lam_max * 1e-3 <= first <= lam_max


def test_cv_lambda_one_se_is_no_smaller():
    z, r, _ = sparse_instance(60, 10, 3, 18, noise=0.5)
    plain = cv_lambda(z, r, rng=RngStream(2))
    conservative = cv_lambda(z, r, rng=RngStream(2), one_se=True)
    assert conservative >= plain
