"""Eigensolver contract, RNG streams, and gaussian sampling."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from _oracles import charpoly_eig, fix_sign
from transfarm.numerics import (
    RngStream,
    correlated_normal,
    standard_normal_matrix,
    sym_eig,
    toeplitz_correlation,
)

SEEDS = [0, 1, 2, 3, 4]


def random_symmetric(n, seed):
    gen = np.random.default_rng(seed)
    a = gen.standard_normal((n, n))
    return (a + a.T) / 2.0


# ----------------------------------------------------------------------
# sym_eig
# ----------------------------------------------------------------------


def test_identity_eigen():
    res = sym_eig(np.eye(3))
    assert_allclose(res.eigenvalues, np.ones(3))
    assert_allclose(res.eigenvectors, np.eye(3))


def test_diagonal_top_one():
    res = sym_eig(np.diag([4.0, 1.0]), top_k=1)
    assert_allclose(res.eigenvalues, [4.0])
    assert_allclose(res.eigenvectors, [[1.0], [0.0]])


def test_matches_charpoly_oracle():
    a = random_symmetric(6, 42)
    res = sym_eig(a)
    ref_values, ref_vectors = charpoly_eig(a)
    assert_allclose(res.eigenvalues, ref_values, atol=1e-8)
    assert_allclose(res.eigenvectors, ref_vectors, atol=1e-6)


@pytest.mark.parametrize("seed", SEEDS)
def test_trace_equals_eigenvalue_sum(seed):
    a = random_symmetric(7, seed)
    res = sym_eig(a)
    assert_allclose(np.trace(a), np.sum(res.eigenvalues), rtol=1e-7)


@pytest.mark.parametrize("seed", SEEDS)
def test_orthonormal_and_reconstructs(seed):
    a = random_symmetric(9, seed + 100)
    res = sym_eig(a)
    v = res.eigenvectors
    assert np.max(np.abs(v.T @ v - np.eye(9))) < 1e-10
    resid = a @ v - v * res.eigenvalues
    assert np.max(np.abs(resid)) < 1e-8


def test_descending_order_and_sign_convention():
    a = random_symmetric(8, 7)
    res = sym_eig(a)
    assert np.all(np.diff(res.eigenvalues) <= 0)
    for j in range(8):
        col = res.eigenvectors[:, j]
        assert np.array_equal(col, fix_sign(col))


def test_deterministic_including_signs():
    a = random_symmetric(10, 11)
    first = sym_eig(a)
    second = sym_eig(a)
    assert np.array_equal(first.eigenvalues, second.eigenvalues)
    assert np.array_equal(first.eigenvectors, second.eigenvectors)


def test_top_k_slices_the_full_result():
    a = random_symmetric(6, 5)
    full = sym_eig(a)
    top = sym_eig(a, top_k=2)
    assert np.array_equal(top.eigenvalues, full.eigenvalues[:2])
    assert np.array_equal(top.eigenvectors, full.eigenvectors[:, :2])


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        sym_eig(np.arange(6.0).reshape(2, 3))
    skew = np.array([[0.0, 1.0], [-1.0, 0.0]])
    with pytest.raises(ValueError):
        sym_eig(skew)
    with pytest.raises(ValueError):
        sym_eig(np.eye(3), top_k=4)
    # top_k=0 is a valid (empty) slice, used by rank-0 decompositions
    empty = sym_eig(np.eye(3), top_k=0)
    assert empty.eigenvalues.shape == (0,)
    assert empty.eigenvectors.shape == (3, 0)


# ----------------------------------------------------------------------
# rng streams
# ----------------------------------------------------------------------


def test_same_stream_is_bitwise_identical():
    a = standard_normal_matrix(RngStream(3, 1), 10, 4)
    b = standard_normal_matrix(RngStream(3, 1), 10, 4)
    assert np.array_equal(a, b)


def test_standard_normal_moments():
    draws = standard_normal_matrix(RngStream(0), 100000, 1).ravel()
    assert abs(draws.mean()) < 0.02
    assert abs(draws.var() - 1.0) < 0.02


def test_distinct_streams_decorrelated():
    a = standard_normal_matrix(RngStream(0, 0), 10000, 1).ravel()
    b = standard_normal_matrix(RngStream(0, 1), 10000, 1).ravel()
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.05


def test_substream_keys_partition_the_stream():
    root = RngStream(9)
    x = root.substream(2, 5).generator(1).standard_normal(8)
    y = root.substream(2, 5).generator(1).standard_normal(8)
    z = root.substream(2, 6).generator(1).standard_normal(8)
    assert np.array_equal(x, y)
    assert not np.array_equal(x, z)


def test_zero_dimension_rejected():
    with pytest.raises(ValueError):
        standard_normal_matrix(RngStream(0), 0, 3)
    with pytest.raises(ValueError):
        standard_normal_matrix(RngStream(0), 3, 0)


# ----------------------------------------------------------------------
# correlated sampling
# ----------------------------------------------------------------------


def test_toeplitz_entries():
    cov = toeplitz_correlation(0.5, 4)
    for i in range(4):
        for j in range(4):
            assert cov[i, j] == 0.5 ** abs(i - j)
    assert np.array_equal(toeplitz_correlation(0.0, 3), np.eye(3))


def test_identity_covariance_moments():
    draws = correlated_normal(RngStream(1), 50000, np.eye(3))
    assert np.max(np.abs(draws.mean(axis=0))) < 0.03
    emp = draws.T @ draws / 50000
    assert np.max(np.abs(emp - np.eye(3))) < 0.03


def test_toeplitz_empirical_covariance():
    cov = toeplitz_correlation(0.5, 20)
    draws = correlated_normal(RngStream(2), 50000, cov)
    emp = draws.T @ draws / 50000
    # law-of-large-numbers check on every entry
    assert np.max(np.abs(emp - cov)) < 0.03


def test_cholesky_reproduces_covariance():
    cov = toeplitz_correlation(0.5, 12)
    chol = np.linalg.cholesky(cov)
    assert np.max(np.abs(chol @ chol.T - cov)) < 1e-10


def test_degenerate_covariance_rejected():
    singular = np.ones((3, 3))
    with pytest.raises((ValueError, np.linalg.LinAlgError)):
        correlated_normal(RngStream(0), 10, singular)
