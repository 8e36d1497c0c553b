"""Dense matrix kernels: exponentials, Lyapunov solves, PSD factors, quadrature.

The heavy lifting is delegated to scipy (Pade scaling-and-squaring for the
exponential, Bartels-Stewart for the Lyapunov equation, Gauss-Kronrod for
the matrix quadrature); this module pins down the input validation and the
error contracts the rest of the package relies on.
"""

import numpy as np
import scipy.linalg as sla
from scipy.integrate import quad_vec

from .errors import NotPositiveSemidefinite, QuadratureError, SingularLyapunov, ValidationError

PSD_TOL = 1e-10


def as_square(M, name="matrix"):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValidationError(f"{name} must be square, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValidationError(f"{name} has non-finite entries")
    return M


def sym(M):
    return 0.5 * (M + M.T)


def spectral_abscissa(M):
    """Largest real part among the eigenvalues of `M`."""
    M = as_square(M)
    if M.size == 0:
        return -np.inf
    return float(np.max(np.linalg.eigvals(M).real))


def is_hurwitz(M, margin=0.0):
    return spectral_abscissa(M) < -margin


def expm(M):
    """Matrix exponential ``e^M`` for a general (non-symmetric) square matrix.

    Raises
    ------
    ValidationError
        If `M` is not square or contains NaN/Inf.
    """
    M = as_square(M)
    if M.size == 0:
        return np.zeros((0, 0))
    return sla.expm(M)


def expm_grid(M, times):
    """Evaluate ``e^{tM}`` for every ``t`` in `times`.

    One real Schur decomposition ``M = Z T Z^T`` is shared by the whole grid,
    so each point only exponentiates the quasi-triangular factor.

    Returns
    -------
    ndarray, shape (len(times), n, n)
    """
    M = as_square(M)
    times = np.asarray(times, dtype=float).ravel()
    n = M.shape[0]
    out = np.empty((times.size, n, n))
    if n == 0:
        return out
    T, Z = sla.schur(M, output="real")
    for k, t in enumerate(times):
        out[k] = Z @ sla.expm(t * T) @ Z.T
    return out


def solve_lyapunov(B, C):
    """Solve ``B X + X B^T = C`` for symmetric `X`.

    Raises
    ------
    SingularLyapunov
        If two eigenvalues of `B` satisfy ``lam_i + lam_j = 0``, in which case
        the Lyapunov operator is singular.
    """
    B = as_square(B, "B")
    C = as_square(C, "C")
    if B.shape != C.shape:
        raise ValidationError(f"shape mismatch: B {B.shape} vs C {C.shape}")
    if B.size == 0:
        return np.zeros_like(B)
    lam = np.linalg.eigvals(B)
    gap = np.min(np.abs(lam[:, None] + lam[None, :]))
    scale = max(np.linalg.norm(B, 2), 1e-300)
    if gap <= 1e-13 * scale:
        raise SingularLyapunov(f"Lyapunov operator singular (min |lam_i + lam_j| = {gap:.3e})")
    X = sla.solve_continuous_lyapunov(B, C)
    return sym(X)


def factor_psd(S, tol=PSD_TOL):
    """Lower-triangular ``L`` with ``L L^T = S`` for symmetric PSD `S`.

    Eigenvalues in ``[-tol*||S||, 0)`` are clipped to zero, so rank-deficient
    covariances are accepted.

    Raises
    ------
    NotPositiveSemidefinite
        If an eigenvalue is below ``-tol*||S||``.
    """
    S = as_square(S, "S")
    n = S.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    S = sym(S)
    norm = np.linalg.norm(S, 2)
    if norm == 0.0:
        return np.zeros_like(S)
    w, V = np.linalg.eigh(S)
    if w[0] < -tol * norm:
        raise NotPositiveSemidefinite(
            f"matrix is not positive semidefinite: min eigenvalue {w[0]:.3e} (norm {norm:.3e})"
        )
    W = V * np.sqrt(np.clip(w, 0.0, None))
    # S = W W^T; QR of W^T gives W = R^T Q^T, hence S = R^T R
    R = np.linalg.qr(W.T, mode="r")
    L = R.T
    signs = np.where(np.diag(L) < 0, -1.0, 1.0)
    return L * signs


def integrate_matrix_function(f, T, tol=1e-10, decay_rate=None, limit=2000):
    """Integrate a matrix-valued function over ``[0, T]``.

    Parameters
    ----------
    f : callable
        ``t -> ndarray``; every call must return the same shape.
    T : float
        Upper limit of the finite part.
    tol : float
        Absolute error target, including the tail estimate below.
    decay_rate : float, optional
        If given, `f` is treated as decaying like ``exp(-decay_rate*t)`` past
        `T` and the tail bound ``||f(T)|| / decay_rate`` is added to the error.

    Returns
    -------
    value : ndarray
    error : float
        Estimated absolute error (max-norm).

    Raises
    ------
    QuadratureError
        If `tol` is not reached within `limit` subintervals.
    """
    if T < 0:
        raise ValidationError("T must be nonnegative")
    probe = np.asarray(f(0.0), dtype=float)
    if T == 0:
        return np.zeros_like(probe), 0.0
    value, err, info = quad_vec(
        lambda t: np.asarray(f(t), dtype=float),
        0.0,
        float(T),
        epsabs=0.5 * tol,
        epsrel=0.0,
        norm="max",
        limit=limit,
        full_output=True,
    )
    if decay_rate is not None:
        if decay_rate <= 0:
            raise ValidationError("decay_rate must be positive")
        err += float(np.max(np.abs(f(T)))) / decay_rate
    if info.status != 0 or err > tol:
        raise QuadratureError(f"quadrature did not converge: error estimate {err:.3e} > tol {tol:.3e}")
    return value, float(err)
