import math

import numpy as np
import pytest
import scipy.linalg as sla

from glereduce.correlation import (
    CorrelationSeries,
    agreement,
    empirical_autocorrelation,
    l2_error,
    l2_norm_on_grid,
    vacf_full,
    vacf_reduced,
)
from glereduce.errors import ValidationError
from glereduce.model import FullModel, Trajectory
from glereduce.projection import compute_blocks, compute_moments
from glereduce.reduction import assemble_extended, fit
from glereduce.simulate import SimConfig, simulate_full

import _factories as fx


def test_undamped_oscillator_is_cosine():
    t = np.linspace(0, 10, 101)
    s = vacf_full(FullModel([[1.0]], [[0.0]], kBT=1.7), np.eye(1), t)
    np.testing.assert_allclose(s.values[:, 0, 0], 1.7 * np.cos(t), atol=1e-13)
    assert s.kind == "full-exact"


def test_overdamped_oscillator():
    t = np.linspace(0, 8, 81)
    lp, lm = np.roots([1.0, 3.0, 1.0])
    # q(0) = 0, p(0) = 1 fixes p(t); note p'(0) = -3
    expected = (lp * np.exp(lp * t) - lm * np.exp(lm * t)) / (lp - lm)
    s = vacf_full(FullModel([[1.0]], [[3.0]]), np.eye(1), t)
    np.testing.assert_allclose(s.values[:, 0, 0], expected, atol=1e-13)


def test_equipartition_at_zero(rng):
    for _ in range(5):
        model, basis = fx.random_problem(rng, n_range=(4, 15))
        s = vacf_full(model, basis, [0.0, 1.0])
        np.testing.assert_allclose(s.values[0], model.kBT * np.eye(basis.m), atol=1e-12)
        b = compute_blocks(model, basis)
        mom = compute_moments(b, 2)
        for order in (0, 1):
            try:
                r = fit(b, mom, order)
            except Exception:
                continue
            sr = vacf_reduced(r, [0.0, 1.0])
            np.testing.assert_allclose(sr.values[0], model.kBT * np.eye(basis.m), atol=1e-12)


def test_decoupled_reduction_is_exact(rng):
    model, basis = fx.decoupled_problem(rng)
    b = compute_blocks(model, basis)
    mom = compute_moments(b, 6)
    t = np.linspace(0, 6, 61)
    full = vacf_full(model, basis, t)
    for order in range(4):
        red = vacf_reduced(fit(b, mom, order), t)
        assert np.abs(red.values - full.values).max() <= 1e-10


def test_exact_rational_kernel_is_reproduced(rng):
    # one eliminated coordinate makes the kernel exactly order 2; scalar
    # damping keeps Gamma12 = 0 so the independent-noise embedding exists
    for _ in range(5):
        A = fx.random_spd(rng, 2)
        G = rng.uniform(0.3, 3.0) * np.eye(2)
        model = FullModel(A, G)
        Phi = fx.random_orthonormal(rng, 2, 1)
        b = compute_blocks(model, Phi)
        r = fit(b, compute_moments(b, 2), 2)
        t = np.linspace(0, 10, 201)
        err = np.abs(vacf_reduced(r, t).values - vacf_full(model, Phi, t).values).max()
        assert err <= 1e-8


def test_reference_order2_matches_full(ref_model, ref_basis, ref_blocks, ref_moments):
    t = np.linspace(0, 10, 201)
    r = fit(ref_blocks, ref_moments, 2)
    assert np.abs(vacf_reduced(r, t).values - vacf_full(ref_model, ref_basis, t).values).max() <= 1e-8


def _local_derivatives(f, t, order, h=0.02, half=8, deg=10):
    x = h * np.arange(-half, half + 1)
    y = np.array([f(t + s) for s in x])
    c = np.polynomial.polynomial.polyfit(x, y, deg)
    return [math.factorial(k) * c[k] for k in range(order + 1)]


def test_series_satisfies_characteristic_ode(ref_blocks, ref_moments):
    # every entry of exp(tL) obeys chi_L(d/dt) = 0
    r = fit(ref_blocks, ref_moments, 1)
    L = assemble_extended(r).drift
    coeffs = np.poly(L)
    dim = L.shape[0]
    f = lambda t: vacf_reduced(r, [0.0, t]).values[1, 0, 0] if t > 0 else \
        (vacf_reduced(r, [0.0]).values[0, 0, 0] if t == 0 else np.nan)
    for t0 in (1.0, 2.5):
        d = _local_derivatives(f, t0, dim)
        residual = sum(coeffs[dim - k] * d[k] for k in range(dim + 1))
        assert abs(residual) <= 1e-6


def test_full_vacf_transpose_identity(rng):
    model, basis = fx.random_problem(rng, n_range=(6, 10), m_max=3)
    t = np.linspace(0, 3, 7)
    s = vacf_full(model, basis, t)
    n = model.n
    D = model.drift()
    Q = model.stationary_covariance()
    P = np.zeros((2 * n, basis.m))
    P[n:] = basis.Phi
    for k, tk in enumerate(t):
        other = P.T @ Q @ sla.expm(tk * D.T) @ P
        np.testing.assert_allclose(s.values[k].T, other, atol=1e-12)


def test_vacf_full_rejects_mismatch(ref_model):
    with pytest.raises(ValidationError):
        vacf_full(ref_model, np.eye(3)[:, :1], [0.0, 1.0])
    with pytest.raises(ValidationError):
        vacf_full(ref_model, np.eye(2)[:, :1], [0.5, 1.0])


def test_unstable_reduced_warns(ref_blocks, ref_moments):
    r = fit(ref_blocks, ref_moments, 0)
    r.Gamma_add = np.array([[-3.0]])
    with pytest.warns(UserWarning):
        s = vacf_reduced(r, np.linspace(0, 100, 11))
    assert s.meta["unstable_horizon"]


def test_white_noise_has_no_memory():
    x = np.random.default_rng(1).standard_normal((20_000, 2))
    s = empirical_autocorrelation(x, 20, dt=1.0)
    np.testing.assert_allclose(s.values[0], np.eye(2), atol=0.05)
    frac, ok = agreement(s, CorrelationSeries(s.times, np.zeros_like(s.values), "full-exact"))
    assert frac >= 0.95
    assert ok[1:].mean() >= 0.95


def test_empirical_ensemble_errors_shrink():
    rng = np.random.default_rng(2)
    small = empirical_autocorrelation(rng.standard_normal((4, 500, 1)), 5, dt=0.1)
    large = empirical_autocorrelation(rng.standard_normal((64, 500, 1)), 5, dt=0.1)
    assert large.stderr.mean() < small.stderr.mean() / 2
    assert large.meta["error_method"] == "ensemble"


def test_empirical_max_lag_guard():
    with pytest.raises(ValidationError):
        empirical_autocorrelation(np.zeros((100, 1)), 30, dt=1.0)
    with pytest.raises(ValidationError):
        empirical_autocorrelation(np.zeros((100, 1)), 3)


def test_empirical_matches_cosine_for_undamped_oscillator():
    model = FullModel([[1.0]], [[0.0]])
    traj = simulate_full(model, SimConfig(dt=0.01, steps=200_000, seed=3, ensemble=64, record_stride=10))
    s = empirical_autocorrelation(traj, 300)
    analytic = vacf_full(model, np.eye(1), s.times)
    frac, _ = agreement(s, analytic)
    assert frac == 1.0


def test_l2_norm_and_error():
    t = np.linspace(0, 1, 1001)
    v = np.ones((t.size, 1, 1))
    assert l2_norm_on_grid(t, v) == pytest.approx(1.0)
    assert l2_norm_on_grid(t, v, t_max=0.25) == pytest.approx(0.5)
    a = CorrelationSeries(t, v, "full-exact")
    b = CorrelationSeries(t, 0 * v, "full-exact")
    assert l2_error(a, b) == pytest.approx(1.0)


def test_series_validation():
    with pytest.raises(ValidationError):
        CorrelationSeries([0.0, 1.0], np.zeros((2, 1, 1)), "bogus")
    with pytest.raises(ValidationError):
        CorrelationSeries([0.0, 0.0], np.zeros((2, 1, 1)), "empirical")


def test_trajectory_velocities_are_used():
    rng = np.random.default_rng(0)
    p = rng.standard_normal((1000, 1))
    traj = Trajectory(0.1, np.zeros((1000, 1)), velocities=p)
    s = empirical_autocorrelation(traj, 5)
    assert s.values[0, 0, 0] == pytest.approx(np.mean(p ** 2))
