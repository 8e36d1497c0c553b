import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from glereduce.errors import NotPositiveSemidefinite, QuadratureError, SingularLyapunov, ValidationError
from glereduce.matops import (
    expm,
    expm_grid,
    factor_psd,
    integrate_matrix_function,
    is_hurwitz,
    solve_lyapunov,
    spectral_abscissa,
)


def taylor_expm(M, terms=60):
    out = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for k in range(1, terms):
        term = term @ M / k
        out = out + term
    return out


def test_expm_zero_is_identity():
    np.testing.assert_array_equal(expm(np.zeros((3, 3))), np.eye(3))


def test_expm_diagonal():
    np.testing.assert_allclose(expm(np.diag([1.0, -1.0])), np.diag([np.e, 1 / np.e]), rtol=1e-14)


def test_expm_rotation_matches_taylor_oracle():
    M = 0.5 * np.pi * np.array([[0.0, 1.0], [-1.0, 0.0]])
    expected = np.array([[0.0, 1.0], [-1.0, 0.0]])
    np.testing.assert_allclose(taylor_expm(M), expected, atol=1e-14)
    np.testing.assert_allclose(expm(M), expected, atol=1e-14)


def test_expm_rejects_nonsquare_and_nan():
    with pytest.raises(ValidationError):
        expm(np.ones((2, 3)))
    with pytest.raises(ValidationError):
        expm(np.array([[np.nan, 0.0], [0.0, 1.0]]))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 4), elements=st.floats(-2, 2)), st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))
def test_expm_of_commuting_sum_factorizes(X, a, b):
    # polynomials in X commute with each other
    M = a * X
    N = b * X @ X / 4 + 0.3 * np.eye(4)
    lhs = expm(M + N)
    rhs = expm(M) @ expm(N)
    assert np.linalg.norm(lhs - rhs) <= 1e-10 * max(np.linalg.norm(lhs), 1.0)


def test_expm_grid_matches_pointwise(rng):
    M = rng.standard_normal((5, 5)) - 2 * np.eye(5)
    times = np.linspace(0, 3, 7)
    grid = expm_grid(M, times)
    for t, E in zip(times, grid):
        np.testing.assert_allclose(E, expm(t * M), rtol=1e-11, atol=1e-13)


def test_expm_columns_decay_for_positive_spectrum(rng):
    G = rng.standard_normal((4, 4)) + 4 * np.eye(4)
    assert np.min(np.linalg.eigvals(G).real) > 0
    norms = [np.linalg.norm(expm(-t * G)) for t in (5.0, 10.0, 20.0)]
    assert norms[0] > norms[1] > norms[2]


def test_lyapunov_scalar():
    np.testing.assert_allclose(solve_lyapunov(np.array([[-1.0]]), np.array([[-2.0]])), [[1.0]])


def test_lyapunov_diagonal_formula():
    B = np.diag([-1.0, -2.0])
    C = -np.array([[2.0, 3.0], [3.0, 4.0]])
    X = solve_lyapunov(B, C)
    lam = np.diag(B)
    np.testing.assert_allclose(X, C / (lam[:, None] + lam[None, :]), rtol=1e-14)
    np.testing.assert_allclose(X, np.ones((2, 2)), rtol=1e-14)


def test_lyapunov_singular_operator():
    B = np.diag([1.0, -1.0])
    with pytest.raises(SingularLyapunov):
        solve_lyapunov(B, np.eye(2))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2 ** 32 - 1))
def test_lyapunov_residual_and_symmetry(n, seed):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((n, n))
    B -= (spectral_abscissa(B) + 0.5) * np.eye(n)
    S = rng.standard_normal((n, n))
    C = S + S.T
    X = solve_lyapunov(B, C)
    assert np.array_equal(X, X.T)
    assert np.linalg.norm(B @ X + X @ B.T - C) <= 1e-10 * np.linalg.norm(C)


def test_factor_psd_examples():
    np.testing.assert_allclose(factor_psd(np.eye(2)), np.eye(2), atol=1e-15)
    np.testing.assert_allclose(factor_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)


def test_factor_psd_rank_one():
    v = np.array([1.0, -2.0, 0.5])
    S = np.outer(v, v)
    L = factor_psd(S)
    np.testing.assert_allclose(L @ L.T, S, atol=1e-12)
    assert np.allclose(L, np.tril(L))


def test_factor_psd_rejects_indefinite():
    with pytest.raises(NotPositiveSemidefinite):
        factor_psd(np.diag([1.0, -0.1]))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10), st.integers(1, 10), st.integers(0, 2 ** 32 - 1))
def test_factor_psd_reconstruction(n, rank, seed):
    rng = np.random.default_rng(seed)
    Y = rng.standard_normal((n, min(rank, n)))
    S = Y @ Y.T
    L = factor_psd(S)
    assert np.linalg.norm(L @ L.T - S) <= 1e-10 * np.linalg.norm(S)
    assert np.all(np.diag(L) >= 0)


def test_hurwitz_predicate():
    assert is_hurwitz(np.diag([-1.0, -2.0]))
    assert not is_hurwitz(np.diag([-1.0, 0.0]))


def test_integrate_exponential():
    val, err = integrate_matrix_function(lambda t: np.exp(-t) * np.eye(2), 40.0, tol=1e-8, decay_rate=1.0)
    np.testing.assert_allclose(val, np.eye(2), atol=1e-8)
    assert err <= 1e-8


def test_integrate_zero():
    val, err = integrate_matrix_function(lambda t: np.zeros((2, 2)), 10.0)
    np.testing.assert_array_equal(val, 0.0)


def test_integrate_reference_kernel(ref_blocks):
    from glereduce.projection import eval_kernel, kernel_decay_rate

    val, _ = integrate_matrix_function(lambda t: eval_kernel(ref_blocks, t), 60.0, tol=1e-9,
                                       decay_rate=kernel_decay_rate(ref_blocks))
    np.testing.assert_allclose(val, [[0.25]], atol=1e-8)


def test_integrate_reports_unreached_tolerance():
    with pytest.raises(QuadratureError):
        integrate_matrix_function(lambda t: np.exp(-0.01 * t) * np.eye(1), 10.0, tol=1e-8, decay_rate=0.01)
