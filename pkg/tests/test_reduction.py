import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from glereduce.errors import SingularMoment, SingularSystem, ValidationError
from glereduce.model import FullModel
from glereduce.projection import KernelMoments, compute_blocks, compute_moments
from glereduce.reduction import (
    approx_kernel_on_grid,
    approx_moments,
    assemble_extended,
    auxiliary_covariance,
    colored_noise_covariance,
    companion_drift,
    eval_approx_kernel,
    fdt_residual,
    fit,
    fit_markovian,
    fit_rational,
    sdp_auxiliary_covariance,
    solve_coefficients,
    stack_c,
)

import _factories as fx


def scal(X):
    return float(np.asarray(X).reshape(-1)[0])


def test_order0_reference(ref_blocks, ref_moments):
    r = fit_markovian(ref_blocks, ref_moments)
    assert scal(r.Gamma_add) == pytest.approx(0.25)
    assert scal(r.damping) == pytest.approx(1.25)
    assert scal(r.Sigma) == pytest.approx(2 * 1.25 * ref_blocks.kBT)
    assert r.Bcoef == [] and r.Ccoef == []
    assert fdt_residual(r) == {"lyapunov_residual": 0.0, "pinning_residual": 0.0}


def test_order0_decoupled_is_projected_langevin(rng):
    model, basis = fx.decoupled_problem(rng)
    b = compute_blocks(model, basis)
    r = fit_markovian(b, compute_moments(b, 0))
    np.testing.assert_array_equal(r.damping, b.G11)
    np.testing.assert_allclose(r.A_eff, model.A[:2, :2])


def test_order0_clips_indefinite_damping(ref_blocks):
    mom = KernelMoments(M=[np.zeros((1, 1))], Minf=np.array([[-2.0]]))
    with pytest.warns(UserWarning):
        r = fit_markovian(ref_blocks, mom)
    assert r.diagnostics["clipped_damping"]
    assert scal(r.damping) == pytest.approx(0.0, abs=1e-15)


def test_order1_reference(ref_blocks, ref_moments):
    r = fit_rational(ref_blocks, ref_moments, 1)
    assert scal(r.Bcoef[0]) == pytest.approx(-2.0)
    assert scal(r.Ccoef[0]) == pytest.approx(0.5)
    assert scal(eval_approx_kernel(r, 0.5)) == pytest.approx(0.5 * np.exp(-1.0), rel=1e-14)
    assert scal(r.Sigma_aux) == pytest.approx(2.0 * ref_blocks.kBT)
    assert scal(r.Qaux) == pytest.approx(0.5)


def test_order2_reference(ref_blocks, ref_moments):
    r = fit_rational(ref_blocks, ref_moments, 2)
    B0, B1 = (scal(B) for B in r.Bcoef)
    C0, C1 = (scal(C) for C in r.Ccoef)
    assert (B0, B1) == pytest.approx((-1.0, -2.0), abs=1e-14)
    assert (C0, C1) == pytest.approx((0.5, 0.5), abs=1e-14)
    # state order (z1, z0): Qaux = [[Q1, C1], [C1, C0]]
    np.testing.assert_allclose(r.Qaux, [[1.5, 0.5], [0.5, 0.5]], atol=1e-14)
    assert C1 == pytest.approx(-B1 * 0.25)


def test_order2_qaux_matches_closed_form(rng):
    # Q1 = -B1 C0 - C1 B0^T for general m
    for _ in range(10):
        model, basis = fx.random_problem(rng, n_range=(5, 14), m_max=3, gamma="scalar")
        b = compute_blocks(model, basis)
        try:
            r = fit_rational(b, compute_moments(b, 4), 2)
        except Exception:
            continue
        if r.diagnostics["qaux_method"] != "block-diagonal":
            continue
        B0, B1 = r.Bcoef
        C0, C1 = r.Ccoef
        m = r.m
        Q1 = r.Qaux[:m, :m] / r.kBT
        expected = -B1 @ C0 - C1 @ B0.T
        assert np.abs(Q1 - expected).max() <= 1e-8 * max(np.abs(expected).max(), 1.0)


def test_order3_reference_is_singular(ref_blocks, ref_moments):
    with pytest.raises(SingularSystem):
        fit_rational(ref_blocks, ref_moments, 3)


def test_singular_minf_at_order1():
    model = FullModel(np.diag([1.0, 2.0]), np.array([[1.0, 0.5], [0.5, 1.0]]))
    b = compute_blocks(model, fx.REF_PHI)
    mom = compute_moments(b, 2)
    assert abs(scal(mom.Minf)) < 1e-15
    with pytest.raises(SingularMoment):
        fit_rational(b, mom, 1)


def test_fit_rejects_order0_in_rational(ref_blocks, ref_moments):
    with pytest.raises(ValidationError):
        fit_rational(ref_blocks, ref_moments, 0)


def test_missing_moments(ref_blocks):
    with pytest.raises(ValidationError):
        fit_rational(ref_blocks, compute_moments(ref_blocks, 1), 2)


@pytest.mark.parametrize("order", [1, 2])
def test_fdt_residuals_reference(ref_blocks, ref_moments, order):
    r = fit_rational(ref_blocks, ref_moments, order)
    res = fdt_residual(r)
    assert res["lyapunov_residual"] <= 1e-12
    assert res["pinning_residual"] <= 1e-12


def test_theta_n_zero_equals_m0(rng):
    for _ in range(5):
        model, basis = fx.random_problem(rng, n_range=(4, 12), m_max=3, gamma="scalar")
        b = compute_blocks(model, basis)
        mom = compute_moments(b, 4)
        for order in (1, 2):
            try:
                r = fit_rational(b, mom, order)
            except Exception:
                continue
            np.testing.assert_allclose(eval_approx_kernel(r, 0.0), mom.M[0], atol=1e-12 * np.abs(mom.M[0]).max())


def test_order2_matched_derivatives(ref_blocks, ref_moments):
    r = fit_rational(ref_blocks, ref_moments, 2)
    f = lambda t: scal(r.E_last().T @ sla.expm(t * r.Bhat) @ r.Chat)
    h = 1e-4
    assert (f(h) - f(-h)) / (2 * h) == pytest.approx(0.0, abs=1e-7)
    assert (f(h) - 2 * f(0) + f(-h)) / h ** 2 == pytest.approx(-1.0, abs=1e-5)


def test_approx_moments_match_inputs(rng):
    for _ in range(8):
        model, basis = fx.random_problem(rng, n_range=(5, 15), m_max=3, gamma="diag")
        b = compute_blocks(model, basis)
        mom = compute_moments(b, 4)
        for order in (1, 2, 3):
            try:
                r = fit_rational(b, mom, order)
            except Exception:
                continue
            Ms, Minf = approx_moments(r, 2 * order - 2)
            scale = max(np.abs(mom.M[0]).max(), np.abs(mom.Minf).max())
            for ell in range(2 * order - 1):
                assert np.abs(Ms[ell] - mom.M[ell]).max() <= 1e-8 * max(np.abs(mom.M[ell]).max(), scale)
            assert np.abs(Minf - mom.Minf).max() <= 1e-8 * scale


def test_colored_noise_covariance_identity(ref_blocks, ref_moments):
    for order in (1, 2):
        r = fit_rational(ref_blocks, ref_moments, order)
        for tau in (0.0, 0.3, 1.7):
            np.testing.assert_allclose(colored_noise_covariance(r, tau), r.kBT * eval_approx_kernel(r, tau),
                                       atol=1e-13)


def test_extended_stationary_covariance(ref_blocks, ref_moments):
    for order in (0, 1, 2):
        ext = assemble_extended(fit(ref_blocks, ref_moments, order))
        L, N, P = ext.drift, ext.noise, ext.stationary
        assert np.abs(L @ P + P @ L.T + N).max() <= 1e-12
        assert np.linalg.eigvalsh(N)[0] >= -1e-12
        assert np.max(np.linalg.eigvals(L).real) < 0


def test_extended_stationary_random(rng):
    checked = 0
    for _ in range(10):
        model, basis = fx.random_problem(rng, n_range=(5, 15), m_max=3, gamma="scalar")
        b = compute_blocks(model, basis)
        try:
            r = fit_rational(b, compute_moments(b, 2), 2)
        except Exception:
            continue
        ext = assemble_extended(r)
        L, N, P = ext.drift, ext.noise, ext.stationary
        assert np.abs(L @ P + P @ L.T + N).max() <= 1e-9 * np.abs(N).max()
        checked += 1
    assert checked >= 3


def test_roundtrip_refit(rng):
    recovered = 0
    for _ in range(10):
        model, basis = fx.random_problem(rng, n_range=(4, 10), m_max=2, gamma="scalar")
        b = compute_blocks(model, basis)
        try:
            r = fit_rational(b, compute_moments(b, 2), 2)
        except Exception:
            continue
        Ms, Minf = approx_moments(r, 2)
        r2 = fit_rational(b, KernelMoments(M=Ms, Minf=Minf), 2)
        times = np.linspace(0, 10, 101)
        K1 = approx_kernel_on_grid(r, times)
        K2 = approx_kernel_on_grid(r2, times)
        assert np.abs(K1 - K2).max() <= 1e-8 * max(np.abs(K1).max(), 1.0)
        recovered += 1
    assert recovered >= 3


def test_decoupled_fit_every_order(rng):
    model, basis = fx.decoupled_problem(rng)
    b = compute_blocks(model, basis)
    mom = compute_moments(b, 6)
    for order in (1, 2, 3):
        r = fit_rational(b, mom, order)
        assert r.diagnostics["decoupled"]
        assert not np.any(r.Chat)
        ext = assemble_extended(r)
        assert not np.any(ext.drift[ext.z_slice(), ext.p_slice()])
        assert fdt_residual(r)["lyapunov_residual"] <= 1e-12
        assert not np.any(approx_kernel_on_grid(r, [0.0, 1.0]))


def test_order0_kernel_not_pointwise(ref_blocks, ref_moments):
    r = fit_markovian(ref_blocks, ref_moments)
    with pytest.raises(ValidationError):
        eval_approx_kernel(r, 0.0)


def test_companion_drift_layout():
    B = [np.array([[-1.0]]), np.array([[-2.0]]), np.array([[-3.0]])]
    Bhat = companion_drift(B)
    np.testing.assert_array_equal(Bhat, [[0.0, 0.0, -3.0], [1.0, 0.0, -2.0], [0.0, 1.0, -1.0]])
    np.testing.assert_array_equal(stack_c([np.eye(1), 2 * np.eye(1)]), [[2.0], [1.0]])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 3))
def test_coefficients_satisfy_matching(seed, order):
    rng = np.random.default_rng(seed)
    model, basis = fx.random_problem(rng, n_range=(4, 16), m_max=3)
    b = compute_blocks(model, basis)
    mom = compute_moments(b, 2 * order)
    if np.linalg.cond(mom.Minf) > 1e8:
        return
    try:
        _, _, info = solve_coefficients([m for m in mom.M], mom.Minf, order)
    except (SingularSystem, SingularMoment):
        return
    assert info["moment_residual"] <= 1e-10


def test_order3_qaux_constraints(rng):
    found = 0
    for _ in range(30):
        model, basis = fx.random_problem(rng, n_range=(6, 16), m_max=2, gamma="scalar")
        b = compute_blocks(model, basis)
        try:
            r = fit_rational(b, compute_moments(b, 4), 3)
        except Exception:
            continue
        res = fdt_residual(r)
        assert res["pinning_residual"] <= 1e-10
        assert res["lyapunov_residual"] <= 1e-10
        assert np.linalg.eigvalsh(r.Sigma_aux)[0] >= -1e-10 * np.abs(r.Sigma_aux).max()
        found += 1
    assert found >= 1


def test_sdp_agrees_with_pinning(ref_blocks, ref_moments):
    r = fit_rational(ref_blocks, ref_moments, 2)
    Qt, info = sdp_auxiliary_covariance(r.Bhat, r.Chat, r.m)
    np.testing.assert_allclose(Qt[:, -1:], r.Chat, atol=1e-12)
    S = -(r.Bhat @ Qt + Qt @ r.Bhat.T)
    assert np.linalg.eigvalsh(S)[0] >= -1e-8


def test_auxiliary_covariance_block_diagonal_at_order2(ref_blocks, ref_moments):
    r = fit_rational(ref_blocks, ref_moments, 2)
    Qt, info = auxiliary_covariance(r.Bhat, r.Chat, 1)
    S = -(r.Bhat @ Qt + Qt @ r.Bhat.T)
    assert abs(S[0, 1]) <= 1e-14
    assert not info["nonunique"]
