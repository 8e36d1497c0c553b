"""Projected blocks, the exact memory kernel and its moments.

With ``x = Phi q + Psi xi`` the eliminated pair ``(xi, eta = xi')`` evolves
under the matrix ``G = [[0, -I], [A22, Gamma22]]`` and the kernel is

    theta(t) = [A12, Gamma12] exp(-G t) [[A22^-1 A21], [-Gamma21]].

Moments follow the derivative convention ``M_l = theta^(l)(0)`` (no 1/l!),
which is the one consistent with the Laplace expansion
``Theta(lam) = sum_l M_l lam^(l+1)`` used by the rational fits.
"""

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import scipy.linalg as sla

from .basis import PartitionBasis
from .errors import StabilityError, ValidationError
from .matops import spectral_abscissa, sym

MOMENT_CONVENTION = "derivative:M_l=theta^(l)(0)"


@dataclass(frozen=True)
class ProjectedBlocks:
    A11: np.ndarray
    A12: np.ndarray
    A21: np.ndarray
    A22: np.ndarray
    G11: np.ndarray
    G12: np.ndarray
    G21: np.ndarray
    G22: np.ndarray
    Gmat: np.ndarray
    A_eff: np.ndarray
    kBT: float = 1.0

    @property
    def m(self):
        return self.A11.shape[0]

    @property
    def k(self):
        """Dimension of the eliminated coordinate block."""
        return self.A22.shape[0]

    def kernel_factors(self):
        """``(left, right)`` with ``theta(t) = left exp(-G t) right``."""
        left = np.hstack([self.A12, self.G12])
        right = np.vstack([np.linalg.solve(self.A22, self.A21), -self.G21])
        return left, right

    def theta0(self):
        """``A12 A22^-1 A21 - Gamma12 Gamma21`` evaluated without the exponential."""
        return self.A12 @ np.linalg.solve(self.A22, self.A21) - self.G12 @ self.G21

    def is_decoupled(self, tol=0.0):
        return bool(np.max(np.abs(self.A12), initial=0.0) <= tol and np.max(np.abs(self.G12), initial=0.0) <= tol)


@dataclass(frozen=True)
class KernelMoments:
    M: List[np.ndarray]
    Minf: Optional[np.ndarray]
    convention: str = MOMENT_CONVENTION

    @property
    def L(self):
        return len(self.M) - 1

    def asymmetry(self):
        mats = list(self.M) + ([self.Minf] if self.Minf is not None else [])
        return max(
            (np.linalg.norm(X - X.T) / max(np.linalg.norm(X), 1e-300) for X in mats if np.any(X)),
            default=0.0,
        )


def compute_blocks(model, basis):
    """Project a unit-mass model onto ``basis``.

    Raises
    ------
    ValidationError
        On dimension mismatch, a model that still carries masses, or a
        singular ``A22``.
    """
    if getattr(model, "masses", None) is not None:
        raise ValidationError("compute_blocks expects a unit-mass model; apply mass_scale first")
    if not isinstance(basis, PartitionBasis):
        basis = PartitionBasis.from_phi(basis)
    A, Gm = model.A, model.Gamma
    if basis.n != A.shape[0]:
        raise ValidationError(f"basis dimension {basis.n} does not match model dimension {A.shape[0]}")
    Phi, Psi = basis.Phi, basis.Psi
    A11 = sym(Phi.T @ A @ Phi)
    A12 = Phi.T @ A @ Psi
    A22 = sym(Psi.T @ A @ Psi)
    G11 = sym(Phi.T @ Gm @ Phi)
    G12 = Phi.T @ Gm @ Psi
    G22 = sym(Psi.T @ Gm @ Psi)
    k = A22.shape[0]
    try:
        cho = sla.cho_factor(A22)
    except np.linalg.LinAlgError as exc:
        raise ValidationError("A22 is not positive definite (singular or indefinite)") from exc
    A_eff = sym(A11 - A12 @ sla.cho_solve(cho, A12.T))
    Gmat = np.block([[np.zeros((k, k)), -np.eye(k)], [A22, G22]])
    return ProjectedBlocks(
        A11=A11, A12=A12, A21=A12.T.copy(), A22=A22,
        G11=G11, G12=G12, G21=G12.T.copy(), G22=G22,
        Gmat=Gmat, A_eff=A_eff, kBT=model.kBT,
    )


def eval_kernel(blocks, t):
    """Exact memory kernel ``theta(t)`` at a single time ``t >= 0``."""
    if t < 0:
        raise ValidationError("the memory kernel is defined for t >= 0 only")
    left, right = blocks.kernel_factors()
    return left @ sla.expm(-t * blocks.Gmat) @ right


def kernel_on_grid(blocks, times):
    """``theta`` on a grid, sharing one Schur decomposition of ``-G``."""
    times = np.asarray(times, dtype=float).ravel()
    if np.any(times < 0):
        raise ValidationError("the memory kernel is defined for t >= 0 only")
    left, right = blocks.kernel_factors()
    T, Z = sla.schur(-blocks.Gmat, output="real")
    lz, zr = left @ Z, Z.T @ right
    out = np.empty((times.size, blocks.m, blocks.m))
    for i, t in enumerate(times):
        out[i] = lz @ sla.expm(t * T) @ zr
    return out


def kernel_decay_rate(blocks):
    """Exponential decay rate of ``theta``: ``-spectral_abscissa(-G)``."""
    return -spectral_abscissa(-blocks.Gmat)


def compute_moments(blocks, L, with_minf=True):
    """Moments ``M_0..M_L`` and the integral ``Minf``.

    Raises
    ------
    StabilityError
        If ``Minf`` is requested but ``-G`` is not Hurwitz (the kernel does
        not decay, so its integral is meaningless) or ``G`` is singular.
    """
    if L < 0:
        raise ValidationError("L must be nonnegative")
    left, right = blocks.kernel_factors()
    moments = []
    v = right
    for _ in range(L + 1):
        moments.append(left @ v)
        v = -(blocks.Gmat @ v)
    Minf = None
    if with_minf:
        if kernel_decay_rate(blocks) <= 0:
            raise StabilityError("-G is not Hurwitz; the kernel integral Minf is undefined")
        try:
            Minf = left @ np.linalg.solve(blocks.Gmat, right)
        except np.linalg.LinAlgError as exc:
            raise StabilityError("G is singular; Minf is undefined") from exc
    return KernelMoments(M=moments, Minf=Minf)


def t_star(blocks, factor=0.5):
    """Length of the interval where the moment (Taylor) matching controls the fits."""
    return factor / np.linalg.norm(blocks.Gmat, 2)
