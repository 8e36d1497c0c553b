"""Rational (Pade-type) approximations of the memory kernel and their Markovian embeddings.

An order-n fit replaces the Laplace transform of the kernel by

    R_n(lam) = [I - lam B_0 - ... - lam^n B_{n-1}]^{-1} [lam C_0 + ... + lam^n C_{n-1}]

whose expansion matches ``M_0..M_{2n-2}`` at ``lam = 0`` and ``Minf`` at
``lam = inf``. In the time domain the memory term becomes the last block of
an auxiliary state ``(z_{n-1}, ..., z_1, z_0)`` obeying

    z_k' = z_{k+1} + B_k z_0 + C_k p + zeta_k,      z_n := 0,

so the embedded kernel is ``theta_n(t) = E_last^T exp(t Bhat) Chat``. The
auxiliary noise covariance is chosen so that the colored force seen by ``p``
has covariance ``kBT theta_n``.
"""

import warnings
from dataclasses import dataclass, field
from math import comb
from typing import List, Optional

import numpy as np
import scipy.linalg as sla

from .errors import FdtInfeasible, SingularMoment, SingularSystem, StabilityError, ValidationError
from .matops import expm_grid, spectral_abscissa, sym

RCOND_MIN = 1e-14
PSD_TOL = 1e-10
DECOUPLED_TOL = 1e-12


@dataclass
class ReducedModel:
    order: int
    m: int
    A_eff: np.ndarray
    Gamma11: np.ndarray
    kBT: float
    Bcoef: List[np.ndarray] = field(default_factory=list)
    Ccoef: List[np.ndarray] = field(default_factory=list)
    Gamma_add: Optional[np.ndarray] = None
    Bhat: Optional[np.ndarray] = None
    Chat: Optional[np.ndarray] = None
    Qaux: Optional[np.ndarray] = None
    Sigma: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def aux_dim(self):
        return self.order * self.m

    @property
    def damping(self):
        """Markovian damping acting on ``p``."""
        if self.order == 0:
            return self.Gamma11 + self.Gamma_add
        return self.Gamma11

    @property
    def Sigma_aux(self):
        return self.Sigma[self.m:, self.m:]

    def E_last(self):
        E = np.zeros((self.aux_dim, self.m))
        E[-self.m:] = np.eye(self.m)
        return E


@dataclass
class ExtendedSystem:
    """Memoryless linear SDE ``dX = L X dt + dW`` with ``Cov(dW) = noise dt``.

    The state is ``(q, p, z-block)``; the z-block is empty at order 0.
    """

    drift: np.ndarray
    noise: np.ndarray
    stationary: np.ndarray
    m: int
    order: int

    @property
    def dim(self):
        return self.drift.shape[0]

    def q_slice(self):
        return slice(0, self.m)

    def p_slice(self):
        return slice(self.m, 2 * self.m)

    def z_slice(self):
        return slice(2 * self.m, self.dim)


def _sym_moments(moments, count):
    if len(moments.M) < count:
        raise ValidationError(f"fit needs moments M_0..M_{count - 1}, got {len(moments.M)}")
    M = [sym(np.asarray(X, dtype=float)) for X in moments.M[:count]]
    if moments.Minf is None:
        raise ValidationError("fit needs Minf")
    return M, sym(np.asarray(moments.Minf, dtype=float))


def _coupling_is_zero(blocks):
    scale = max(np.linalg.norm(blocks.A11, 2), np.linalg.norm(blocks.A22, 2),
                np.linalg.norm(blocks.G11, 2), np.linalg.norm(blocks.G22, 2), 1e-300)
    coupling = max(np.linalg.norm(blocks.A12), np.linalg.norm(blocks.G12))
    return coupling <= DECOUPLED_TOL * scale


def fit_markovian(blocks, moments):
    """Order-0 (Markovian) reduction: ``theta(t) ~ Minf delta(t)``.

    The memory is folded into the damping ``Gamma11 + Minf`` and the white
    noise gets covariance ``2 kBT (Gamma11 + Minf)``. If that damping has a
    significantly negative eigenvalue it is clipped to its PSD part with a
    warning.
    """
    if moments.Minf is None:
        raise ValidationError("the Markovian fit needs Minf")
    m = blocks.m
    Gadd = sym(np.asarray(moments.Minf, dtype=float))
    total = sym(blocks.G11 + Gadd)
    w, V = np.linalg.eigh(total)
    clipped = False
    if m and w[0] < -PSD_TOL * max(np.abs(w).max(), 1e-300):
        warnings.warn(f"Gamma11 + Minf is indefinite (min eigenvalue {w[0]:.3e}); clipping to PSD")
        total = (V * np.clip(w, 0, None)) @ V.T
        Gadd = total - blocks.G11
        clipped = True
    noise = 2.0 * blocks.kBT * total
    return ReducedModel(
        order=0, m=m, A_eff=blocks.A_eff.copy(), Gamma11=blocks.G11.copy(), kBT=blocks.kBT,
        Gamma_add=Gadd, Sigma=noise,
        diagnostics={"clipped_damping": clipped, "min_total_damping_eig": float(w[0]) if m else 0.0},
    )


def companion_drift(Bcoef):
    """Drift of the auxiliary block, state ordered ``(z_{n-1}, ..., z_0)``."""
    n = len(Bcoef)
    m = Bcoef[0].shape[0]
    Bhat = np.zeros((n * m, n * m))
    last = slice((n - 1) * m, n * m)
    for i in range(n):
        rows = slice(i * m, (i + 1) * m)
        if i > 0:
            Bhat[rows, (i - 1) * m:i * m] = np.eye(m)
        Bhat[rows, last] += Bcoef[n - 1 - i]
    return Bhat


def stack_c(Ccoef):
    return np.vstack(Ccoef[::-1])


def solve_coefficients(M, Minf, order):
    """Solve the order-n matching conditions for ``B_0..B_{n-1}``, ``C_0..C_{n-1}``.

    With ``M_{-1} := -Minf`` the conditions on the B's read
    ``sum_j B_j M_{n+r-2-j} = M_{n-1+r}`` for ``r = 0..n-1``; the C's follow
    from ``C_k = M_k - sum_{j<k} B_j M_{k-1-j}``.

    Returns
    -------
    Bcoef, Ccoef : lists of (m, m) arrays
    info : dict
        Reciprocal condition number of the block system and the moment
        residual.
    """
    n = order
    m = M[0].shape[0]

    def mom(i):
        return -Minf if i == -1 else M[i]

    H = np.zeros((n * m, n * m))
    R = np.zeros((m, n * m))
    for r in range(n):
        R[:, r * m:(r + 1) * m] = mom(n - 1 + r)
        for j in range(n):
            H[j * m:(j + 1) * m, r * m:(r + 1) * m] = mom(n + r - 2 - j)
    if n == 1:
        rc = 1.0 / np.linalg.cond(Minf) if np.any(Minf) else 0.0
        if not rc > RCOND_MIN:
            raise SingularMoment("Minf is singular; the order-1 fit is undefined")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(H.T, check_finite=True)
    diag = np.abs(np.diag(lu))
    rcond = float(diag.min() / diag.max()) if diag.max() > 0 else 0.0
    if not rcond > RCOND_MIN:
        raise SingularSystem(f"order-{n} moment system is singular (pivot ratio {rcond:.2e})")
    X = sla.lu_solve((lu, piv), R.T).T
    Bcoef = [X[:, j * m:(j + 1) * m] for j in range(n)]
    Ccoef = []
    for k in range(n):
        Ck = M[k].copy()
        for j in range(k):
            Ck -= Bcoef[j] @ M[k - 1 - j]
        Ccoef.append(Ck)
    info = {"pivot_ratio": rcond, "moment_residual": moment_residual(M, Minf, Bcoef, Ccoef)}
    return Bcoef, Ccoef, info


def moment_residual(M, Minf, Bcoef, Ccoef):
    """Largest relative violation of the 2n matching conditions."""
    n = len(Bcoef)
    scale = max(max(np.abs(X).max() for X in M), np.abs(Minf).max(), 1e-300)
    worst = 0.0
    for k in range(2 * n - 1):
        lhs = Ccoef[k].copy() if k < n else np.zeros_like(M[0])
        lhs = lhs - M[k]
        for j in range(min(n, k)):
            lhs += Bcoef[j] @ M[k - 1 - j]
        worst = max(worst, np.abs(lhs).max())
    worst = max(worst, np.abs(Ccoef[-1] + Bcoef[-1] @ Minf).max())
    bscale = max(1.0, max(np.abs(B).max() for B in Bcoef))
    return float(worst / (scale * bscale))


def _block_scaling(Bhat, m):
    """Per-coordinate scales ``s^k`` for block ``z_k`` (``s`` = spectral radius).

    ``z_k`` carries k extra time derivatives relative to ``z_0``, so the raw
    blocks differ by powers of the kernel's frequency scale.
    """
    n = Bhat.shape[0] // m
    s = max(np.max(np.abs(np.linalg.eigvals(Bhat))), 1e-300)
    powers = np.repeat(np.arange(n - 1, -1, -1), m)
    return s ** powers


class _PinnedFamily:
    """Affine family of symmetric ``Qt`` with the last block column fixed.

    Works in scaled coordinates ``Qs = D^-1 Qt D^-1``, ``Bs = D^-1 Bhat D``
    and exposes ``Ss(y) = -(Bs Qs + Qs Bs^T) / scale = S0 + sum_i y_i S_i``.
    """

    def __init__(self, Bhat, Chat, m):
        self.N = N = Bhat.shape[0]
        self.k = k = N - m
        self.m = m
        self.d = d = _block_scaling(Bhat, m)
        self.Bs = Bhat / d[:, None] * d[None, :]
        Cs = Chat / d[:, None]
        self.Q0 = np.zeros((N, N))
        self.Q0[:, k:] = Cs
        self.Q0[k:, :] = Cs.T
        self.Q0 = sym(self.Q0)
        self.scale = max(np.linalg.norm(self.Bs, 2) * np.linalg.norm(Cs, 2), 1e-300)
        self.iu = np.triu_indices(k)
        self.S0 = self.sigma(self.Q0)
        mats = []
        for i, j in zip(*self.iu):
            E = np.zeros((N, N))
            E[i, j] = E[j, i] = 1.0
            mats.append(self.sigma(E))
        self.S = np.stack(mats) if mats else np.zeros((0, N, N))

    def sigma(self, Q):
        return -(self.Bs @ Q + Q @ self.Bs.T) / self.scale

    def sigma_of(self, y):
        return self.S0 + np.tensordot(y, self.S, axes=1)

    def unscaled_q(self, y):
        X = np.zeros((self.k, self.k))
        X[self.iu] = y
        X = X + np.triu(X, 1).T
        Qs = self.Q0.copy()
        Qs[:self.k, :self.k] = X
        return sym(Qs * self.d[:, None] * self.d[None, :])


def auxiliary_covariance(Bhat, Chat, m):
    """Normalized stationary covariance ``Qt`` of the auxiliary block.

    ``Qt`` is symmetric, its last block column is pinned to ``Chat`` (so the
    colored force has covariance ``kBT theta_n``), and the remaining block is
    chosen so that ``Bhat Qt + Qt Bhat^T`` is block diagonal, i.e. the
    auxiliary noises ``zeta_k`` are mutually independent. At order 2 this
    reproduces ``Q1 = -B1 C0 - C1 B0^T``. For m > 1 and n > 2 the conditions
    are overdetermined; the least-squares solution is returned and its
    residual reported.

    Returns
    -------
    Qt : ndarray
    info : dict
        ``constraint_residual`` of the least-squares solve and ``nonunique``
        when the constraint system is rank deficient.
    """
    fam = _PinnedFamily(Bhat, Chat, m)
    if fam.k == 0:
        return fam.unscaled_q(np.zeros(0)), {"constraint_residual": 0.0, "nonunique": False}
    n = fam.N // m
    offdiag = np.ones((fam.N, fam.N), dtype=bool)
    for i in range(n):
        offdiag[i * m:(i + 1) * m, i * m:(i + 1) * m] = False
    sel = np.triu(offdiag)
    Amat = fam.S[:, sel].T
    b = -fam.S0[sel]
    y, _, rank, _ = np.linalg.lstsq(Amat, b, rcond=None)
    resid = np.abs(Amat @ y - b).max() if b.size else 0.0
    info = {
        "constraint_residual": float(resid / max(np.abs(fam.sigma_of(y)).max(), 1e-300)),
        "nonunique": bool(rank < Amat.shape[1]),
    }
    return fam.unscaled_q(y), info


def _relative_min_eig(S):
    if not np.any(S):
        return 0.0
    w = np.linalg.eigvalsh(sym(S))
    return float(w[0] / np.abs(w).max())


def sdp_auxiliary_covariance(Bhat, Chat, m, tol=1e-12):
    """Fallback for :func:`auxiliary_covariance` when its noise covariance is indefinite.

    Searches all symmetric ``Qt`` with the pinned last block column for the
    one maximizing the smallest eigenvalue of ``-(Bhat Qt + Qt Bhat^T)``.
    The last diagonal block of that matrix does not depend on the free
    entries; when it vanishes, PSD forces the matching block row to vanish
    too, and those equalities are imposed exactly through a null-space
    parametrization before the semidefinite program is solved.
    """
    import cvxpy as cp

    fam = _PinnedFamily(Bhat, Chat, m)
    k, p = fam.k, fam.S.shape[0]
    y0 = np.zeros(p)
    Nmat = np.eye(p)
    rows = slice(0, fam.N)
    if np.abs(fam.S0[k:, k:]).max() <= tol:
        Aeq = fam.S[:, k:, :k].reshape(p, -1).T
        beq = -fam.S0[k:, :k].ravel()
        y0 = np.linalg.lstsq(Aeq, beq, rcond=None)[0]
        _, sv, Vt = np.linalg.svd(Aeq)
        rank = int(np.sum(sv > 1e-12 * max(sv.max(initial=0.0), 1.0)))
        Nmat = Vt[rank:].T
        rows = slice(0, k)
    sub0 = fam.sigma_of(y0)[rows, rows]
    subw = np.tensordot(Nmat.T, fam.S, axes=1)[:, rows, rows]
    dsub = sub0.shape[0]
    if Nmat.shape[1] == 0:
        margin = _relative_min_eig(sub0) if dsub else 0.0
        return fam.unscaled_q(y0), {"sdp_margin": margin, "sdp_status": "fixed"}
    w = cp.Variable(Nmat.shape[1])
    t = cp.Variable()
    lmi = sub0 + sum(w[i] * subw[i] for i in range(Nmat.shape[1]))
    lmi = 0.5 * (lmi + lmi.T)
    prob = cp.Problem(cp.Maximize(t), [lmi >> t * np.eye(dsub), t <= 1.0, cp.norm(w, "inf") <= 1e8])
    try:
        prob.solve(solver=cp.CLARABEL)
    except cp.error.SolverError as exc:
        raise FdtInfeasible(f"SDP for the auxiliary covariance failed: {exc}") from exc
    if w.value is None:
        raise FdtInfeasible(f"SDP for the auxiliary covariance failed ({prob.status})")
    y = y0 + Nmat @ np.asarray(w.value).ravel()
    return fam.unscaled_q(y), {"sdp_margin": float(t.value), "sdp_status": prob.status}


def fit_rational(blocks, moments, order):
    """Fit the order-n rational approximation and its FDT-consistent embedding.

    Parameters
    ----------
    blocks : ProjectedBlocks
        Supplies ``A_eff``, ``Gamma11`` and ``kBT``.
    moments : KernelMoments
        Needs ``M_0..M_{2n-2}`` and ``Minf``.
    order : int
        ``n >= 1``; orders 1-3 are the supported range, higher orders use the
        same construction.

    Raises
    ------
    SingularMoment, SingularSystem
        The matching conditions cannot be solved.
    StabilityError
        The embedded drift ``Bhat`` is not Hurwitz.
    FdtInfeasible
        No PSD auxiliary noise covariance reproduces ``kBT theta_n``.
    """
    if order < 1:
        raise ValidationError("fit_rational needs order >= 1; use fit_markovian for order 0")
    m = blocks.m
    kBT = blocks.kBT
    M, Minf = _sym_moments(moments, 2 * order - 1)
    diag = {}
    if _coupling_is_zero(blocks):
        # theta == 0: any stable denominator works; (s + 1)^n keeps Bhat Hurwitz
        Bcoef = [-float(comb(order, j + 1)) * np.eye(m) for j in range(order)]
        Ccoef = [np.zeros((m, m)) for _ in range(order)]
        diag.update(decoupled=True, pivot_ratio=1.0, moment_residual=0.0)
    else:
        Bcoef, Ccoef, info = solve_coefficients(M, Minf, order)
        diag.update(decoupled=False, **info)
    Bhat = companion_drift(Bcoef)
    Chat = stack_c(Ccoef)
    abscissa = spectral_abscissa(Bhat)
    diag["hurwitz_margin"] = -abscissa
    if not abscissa < 0:
        raise StabilityError(f"order-{order} embedding is unstable (spectral abscissa {abscissa:.3e})")
    Qt, qinfo = auxiliary_covariance(Bhat, Chat, m)
    diag.update(qinfo, qaux_method="block-diagonal")
    St = sym(-(Bhat @ Qt + Qt @ Bhat.T))
    if _relative_min_eig(St) < -PSD_TOL:
        diag["block_diagonal_min_eig"] = _relative_min_eig(St)
        Qt, sinfo = sdp_auxiliary_covariance(Bhat, Chat, m)
        diag.update(sinfo, qaux_method="sdp")
        St = sym(-(Bhat @ Qt + Qt @ Bhat.T))
    diag["sigma_min_eig"] = _relative_min_eig(St)
    if diag["sigma_min_eig"] < -PSD_TOL:
        raise FdtInfeasible(
            f"order-{order} auxiliary noise covariance is indefinite "
            f"(relative min eigenvalue {diag['sigma_min_eig']:.2e})"
        )
    Sigma = sla.block_diag(2.0 * kBT * blocks.G11, kBT * St)
    reduced = ReducedModel(
        order=order, m=m, A_eff=blocks.A_eff.copy(), Gamma11=blocks.G11.copy(), kBT=kBT,
        Bcoef=Bcoef, Ccoef=Ccoef, Bhat=Bhat, Chat=Chat, Qaux=kBT * Qt, Sigma=Sigma,
        diagnostics=diag,
    )
    reduced.diagnostics.update(fdt_residual(reduced))
    return reduced


def fit(blocks, moments, order):
    """Dispatch to the Markovian (order 0) or rational (order >= 1) fit."""
    if order == 0:
        return fit_markovian(blocks, moments)
    return fit_rational(blocks, moments, order)


def assemble_extended(reduced):
    """Drift, noise covariance and stationary covariance of ``(q, p, z-block)``.

    ``q' = p``, ``p' = -A_eff q - D p - z_0 + f_1``, ``zb' = Bhat zb + Chat p + zeta``
    with ``D = Gamma11`` (plus ``Gamma_add`` at order 0).
    """
    m, N = reduced.m, reduced.aux_dim
    dim = 2 * m + N
    L = np.zeros((dim, dim))
    L[:m, m:2 * m] = np.eye(m)
    L[m:2 * m, :m] = -reduced.A_eff
    L[m:2 * m, m:2 * m] = -reduced.damping
    noise = np.zeros((dim, dim))
    noise[m:, m:] = reduced.Sigma
    stat = np.zeros((dim, dim))
    if m:
        stat[:m, :m] = reduced.kBT * np.linalg.inv(reduced.A_eff)
        stat[m:2 * m, m:2 * m] = reduced.kBT * np.eye(m)
    if N:
        L[m:2 * m, 2 * m:] = -reduced.E_last().T
        L[2 * m:, m:2 * m] = reduced.Chat
        L[2 * m:, 2 * m:] = reduced.Bhat
        stat[2 * m:, 2 * m:] = reduced.Qaux
    return ExtendedSystem(drift=L, noise=sym(noise), stationary=sym(stat), m=m, order=reduced.order)


def eval_approx_kernel(reduced, t):
    """Embedded kernel ``theta_n(t) = E_last^T exp(t Bhat) Chat``."""
    if reduced.order == 0:
        raise ValidationError("the order-0 kernel is a delta function and cannot be evaluated pointwise")
    if t < 0:
        raise ValidationError("t must be nonnegative")
    return reduced.E_last().T @ sla.expm(t * reduced.Bhat) @ reduced.Chat


def approx_kernel_on_grid(reduced, times):
    if reduced.order == 0:
        raise ValidationError("the order-0 kernel is a delta function and cannot be evaluated pointwise")
    m = reduced.m
    E = expm_grid(reduced.Bhat, times)
    return E[:, -m:, :] @ reduced.Chat


def approx_moments(reduced, L):
    """Moments of the embedded kernel: ``E_last^T Bhat^l Chat`` and ``-E_last^T Bhat^-1 Chat``."""
    m = reduced.m
    out = []
    v = reduced.Chat
    for _ in range(L + 1):
        out.append(v[-m:].copy())
        v = reduced.Bhat @ v
    Minf = -np.linalg.solve(reduced.Bhat, reduced.Chat)[-m:]
    return out, Minf


def fdt_residual(reduced):
    """Relative residuals of the two FDT identities of an embedded fit.

    ``lyapunov``: ``||Bhat Qaux + Qaux Bhat^T + Sigma_aux||``;
    ``pinning``: ``||Qaux E_last - kBT Chat||``. Both vanish for order 0.
    """
    if reduced.order == 0:
        return {"lyapunov_residual": 0.0, "pinning_residual": 0.0}
    B, Q, S = reduced.Bhat, reduced.Qaux, reduced.Sigma_aux
    kC = reduced.kBT * reduced.Chat
    lyap = np.linalg.norm(B @ Q + Q @ B.T + S)
    lyap_scale = np.linalg.norm(S) or max(np.linalg.norm(B) * np.linalg.norm(Q), 1e-300)
    pin = np.linalg.norm(Q @ reduced.E_last() - kC)
    pin_scale = max(np.linalg.norm(kC), np.linalg.norm(Q), 1e-300)
    return {
        "lyapunov_residual": float(lyap / lyap_scale),
        "pinning_residual": float(pin / pin_scale),
    }


def colored_noise_covariance(reduced, tau):
    """``E_last^T exp(tau Bhat) Qaux E_last``, the stationary covariance of the colored force."""
    m = reduced.m
    return (sla.expm(tau * reduced.Bhat) @ reduced.Qaux)[-m:, -m:]
