"""Velocity autocorrelation functions: analytic (full and reduced) and empirical."""

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.integrate import trapezoid

from .basis import PartitionBasis
from .errors import ValidationError
from .matops import spectral_abscissa
from .model import Trajectory
from .reduction import assemble_extended

KINDS = ("full-exact", "reduced-analytic", "empirical")
EQUIPARTITION_RTOL = 1e-8


@dataclass
class CorrelationSeries:
    """Matrix-valued correlation ``C(t) = <p(t) p(0)^T>`` sampled on a grid.

    `stderr`, when present, has the shape of `values` and holds the standard
    error of each entry (empirical series only).
    """

    times: np.ndarray
    values: np.ndarray
    kind: str
    stderr: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).ravel()
        self.values = np.asarray(self.values, dtype=float)
        if self.kind not in KINDS:
            raise ValidationError(f"unknown correlation kind {self.kind!r}")
        if self.values.ndim != 3 or self.values.shape[0] != self.times.size:
            raise ValidationError("values must have shape (len(times), m, m)")
        if self.times.size and self.times[0] != 0.0:
            raise ValidationError("correlation grids start at t = 0")
        if np.any(np.diff(self.times) <= 0):
            raise ValidationError("times must be strictly increasing")

    @property
    def m(self):
        return self.values.shape[1]

    def entry(self, i, j):
        return self.values[:, i, j]


def check_grid(times):
    times = np.asarray(times, dtype=float).ravel()
    if times.size == 0 or times[0] != 0.0:
        raise ValidationError("the time grid must start at 0")
    if np.any(np.diff(times) <= 0):
        raise ValidationError("the time grid must be strictly increasing")
    return times


def _projected_exponential(M, left, right, times):
    """``left @ expm(t M) @ right`` on a grid via one real Schur form of `M`."""
    T, Z = sla.schur(M, output="real")
    lz, zr = left @ Z, Z.T @ right
    out = np.empty((times.size, left.shape[0], right.shape[1]))
    for k, t in enumerate(times):
        out[k] = lz @ sla.expm(t * T) @ zr
    return out


def _observed_columns(basis):
    """Orthonormal columns to project on; a bare array may span the whole space."""
    if isinstance(basis, PartitionBasis):
        return basis.Phi
    Phi = np.atleast_2d(np.asarray(basis, dtype=float))
    if Phi.shape[0] == 1 and Phi.shape[1] > 1:
        Phi = Phi.T
    if np.max(np.abs(Phi.T @ Phi - np.eye(Phi.shape[1]))) > 1e-10:
        raise ValidationError("Phi must have orthonormal columns")
    return Phi


def vacf_full(model, basis, times):
    """Exact projected VACF ``[0 Phi^T] exp(tD) Q [0; Phi]`` of the full model.

    ``Q = diag(kBT A^-1, kBT I)`` is the Gibbs covariance, so the result
    starts at ``kBT I``.
    """
    if getattr(model, "masses", None) is not None:
        raise ValidationError("vacf_full expects a unit-mass model; apply mass_scale first")
    Phi = _observed_columns(basis)
    if Phi.shape[0] != model.n:
        raise ValidationError(f"basis dimension {Phi.shape[0]} does not match model dimension {model.n}")
    times = check_grid(times)
    n, m = model.n, Phi.shape[1]
    D = model.drift()
    abscissa = spectral_abscissa(D)
    scale = max(np.linalg.norm(D, 2), 1.0)
    if abscissa > 1e-10 * scale:
        raise ValidationError(f"full drift has a growing mode (spectral abscissa {abscissa:.3e})")
    left = np.zeros((m, 2 * n))
    left[:, n:] = Phi.T
    right = np.zeros((2 * n, m))
    right[n:] = model.kBT * Phi
    values = _projected_exponential(D, left, right, times)
    return CorrelationSeries(times, values, "full-exact", meta={"spectral_abscissa": abscissa})


def vacf_reduced(reduced, times, horizon_warning=1e6):
    """Analytic VACF of a fitted reduced model.

    The correlations of ``(q, p, z-block)`` with ``p(0)`` obey ``Y' = L Y``
    with ``L`` the extended drift and ``Y(0) = (0, kBT I, 0)``; the p-block
    of ``exp(tL) Y(0)`` is returned.

    A warning is issued (and recorded in ``meta``) when ``L`` has a growing
    mode and the grid is long enough for it to amplify by more than
    `horizon_warning`.
    """
    times = check_grid(times)
    ext = assemble_extended(reduced)
    m = reduced.m
    L = ext.drift
    abscissa = spectral_abscissa(L)
    meta = {"order": reduced.order, "spectral_abscissa": abscissa, "unstable_horizon": False}
    if abscissa > 0 and abscissa * times[-1] > np.log(horizon_warning):
        meta["unstable_horizon"] = True
        warnings.warn(
            f"order-{reduced.order} extended drift grows like exp({abscissa:.3e} t); "
            f"values beyond t = {np.log(horizon_warning) / abscissa:.3g} are unreliable"
        )
    left = np.zeros((m, ext.dim))
    left[:, ext.p_slice()] = np.eye(m)
    right = np.zeros((ext.dim, m))
    right[ext.p_slice()] = reduced.kBT * np.eye(m)
    values = _projected_exponential(L, left, right, times)
    return CorrelationSeries(times, values, "reduced-analytic", meta=meta)


def _lag_products(X, max_lag):
    """``sum_t x(t+k) x(t)^T`` for ``k = 0..max_lag`` via zero-padded FFT."""
    T, m = X.shape
    nfft = 1 << int(np.ceil(np.log2(2 * T)))
    F = np.fft.rfft(X, n=nfft, axis=0)
    S = F[:, :, None] * np.conj(F[:, None, :])
    return np.fft.irfft(S, n=nfft, axis=0)[: max_lag + 1]


def _batch_count(T, max_lag, nbatch=None):
    if nbatch is not None:
        return nbatch
    return int(max(2, min(32, T // (5 * (max_lag + 1)))))


def empirical_autocorrelation(traj, max_lag, dt=None, nbatch=None):
    """Biased lag-product estimator of ``<p(t + tau) p(t)^T>``.

    Parameters
    ----------
    traj : Trajectory, ndarray (T, m) or ndarray (E, T, m)
        Stationary velocity samples (a Trajectory contributes its
        `velocities` when present); a 3-D array is an ensemble of
        independent trajectories.
    max_lag : int
        Largest lag in samples; ``max_lag * dt`` may not exceed a fifth of
        the trajectory span.
    dt : float, optional
        Sample spacing, required unless `traj` is a Trajectory.
    nbatch : int, optional
        Number of batches for the single-trajectory error estimate.

    Returns
    -------
    CorrelationSeries
        ``C(k) = (1/T) sum_t p(t+k) p(t)^T``, averaged over ensemble members.
        The standard error is the spread across members, or across
        contiguous batches when only one trajectory is given.
    """
    if isinstance(traj, Trajectory):
        dt = traj.dt
        X = traj.velocities if traj.velocities is not None else traj.samples
    else:
        X = np.asarray(traj, dtype=float)
    if dt is None or not dt > 0:
        raise ValidationError("a positive sample spacing dt is required")
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValidationError("samples must be (T, m) or (E, T, m)")
    E, T, m = X.shape
    max_lag = int(max_lag)
    if max_lag < 0:
        raise ValidationError("max_lag must be nonnegative")
    if 5 * max_lag > T - 1:
        raise ValidationError(f"max_lag={max_lag} exceeds a fifth of the {T}-sample span")
    if E >= 2:
        per = np.stack([_lag_products(x, max_lag) / T for x in X])
        values = per.mean(axis=0)
        stderr = per.std(axis=0, ddof=1) / np.sqrt(E)
        method = "ensemble"
        nb = E
    else:
        x = X[0]
        values = _lag_products(x, max_lag) / T
        nb = _batch_count(T, max_lag, nbatch)
        blen = T // nb
        if blen <= max_lag:
            raise ValidationError("batches are shorter than max_lag; lower nbatch")
        per = np.stack([_lag_products(x[b * blen:(b + 1) * blen], max_lag) / blen for b in range(nb)])
        stderr = per.std(axis=0, ddof=1) / np.sqrt(nb)
        method = "batch-means"
    times = dt * np.arange(max_lag + 1)
    meta = {"samples": T, "members": E, "error_method": method, "error_groups": nb}
    return CorrelationSeries(times, values, "empirical", stderr=stderr, meta=meta)


def l2_norm_on_grid(times, values, t_max=None):
    """``sqrt(int_0^t_max ||values(t)||_F^2 dt)`` by the trapezoidal rule."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if t_max is not None:
        keep = times <= t_max * (1 + 1e-12)
        times, values = times[keep], values[keep]
    if times.size < 2:
        raise ValidationError("need at least two grid points for an L2 norm")
    sq = np.sum(values.reshape(values.shape[0], -1) ** 2, axis=1)
    return float(np.sqrt(trapezoid(sq, times)))


def l2_error(a, b, t_max=None):
    """L2 distance between two series on their shared grid."""
    if a.times.shape != b.times.shape or np.max(np.abs(a.times - b.times), initial=0.0) > 1e-12:
        raise ValidationError("series must share a time grid")
    return l2_norm_on_grid(a.times, a.values - b.values, t_max)


def agreement(empirical, analytic, nsigma=3.0, floor=0.0):
    """Fraction of (lag, entry) pairs where ``|emp - ana| <= nsigma * stderr + floor``."""
    if empirical.stderr is None:
        raise ValidationError("the empirical series carries no standard errors")
    lags = empirical.times.size
    diff = np.abs(empirical.values - analytic.values[:lags])
    ok = diff <= nsigma * empirical.stderr + floor
    return float(ok.mean()), ok
