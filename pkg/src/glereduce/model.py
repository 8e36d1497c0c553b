"""Full linear Langevin model, mass scaling and PCA stiffness estimation."""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ValidationError
from .matops import as_square, spectral_abscissa

SPD_REL_TOL = 1e-8


@dataclass(frozen=True)
class FullModel:
    """Linear Langevin system ``x' = v, M v' = -A x - Gamma v + f``.

    `masses` is ``None`` for a unit-mass (already scaled) model.
    """

    A: np.ndarray
    Gamma: np.ndarray
    kBT: float = 1.0
    masses: Optional[np.ndarray] = None

    def __post_init__(self):
        A = as_square(self.A, "A")
        Gamma = as_square(self.Gamma, "Gamma")
        if A.shape != Gamma.shape:
            raise ValidationError(f"A {A.shape} and Gamma {Gamma.shape} differ in shape")
        if not np.isfinite(self.kBT) or self.kBT < 0:
            raise ValidationError(f"kBT must be finite and nonnegative, got {self.kBT}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Gamma", Gamma)
        object.__setattr__(self, "kBT", float(self.kBT))
        if self.masses is not None:
            masses = np.asarray(self.masses, dtype=float).ravel()
            if masses.size != A.shape[0]:
                raise ValidationError(f"expected {A.shape[0]} masses, got {masses.size}")
            object.__setattr__(self, "masses", masses)

    @property
    def n(self):
        return self.A.shape[0]

    def drift(self):
        """First-order drift ``D = [[0, I], [-A, -Gamma]]`` for ``w = (x, v)``."""
        n = self.n
        D = np.zeros((2 * n, 2 * n))
        D[:n, n:] = np.eye(n)
        D[n:, :n] = -self.A
        D[n:, n:] = -self.Gamma
        return D

    def stationary_covariance(self):
        n = self.n
        Q = np.zeros((2 * n, 2 * n))
        Q[:n, :n] = self.kBT * np.linalg.inv(self.A)
        Q[n:, n:] = self.kBT * np.eye(n)
        return Q


@dataclass(frozen=True)
class Trajectory:
    """Samples on a uniform time grid.

    `samples` is ``(T, m)`` for one trajectory or ``(E, T, m)`` for an
    ensemble of `E` independent members; `velocities` and `aux`, when
    present, share the leading dimensions.
    """

    dt: float
    samples: np.ndarray
    velocities: Optional[np.ndarray] = None
    aux: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim < 2:
            samples = samples.reshape(-1, 1)
        if samples.ndim > 3:
            raise ValidationError("samples must be (T, m) or (E, T, m)")
        if not self.dt > 0:
            raise ValidationError(f"dt must be positive, got {self.dt}")
        if samples.shape[-2] < 2:
            raise ValidationError("a trajectory needs at least two samples")
        object.__setattr__(self, "samples", samples)
        for name in ("velocities", "aux"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=float)
            if arr.ndim < 2:
                arr = arr.reshape(-1, 1)
            if arr.shape[:-1] != samples.shape[:-1]:
                raise ValidationError(f"{name} must match the coordinate samples in leading shape")
            object.__setattr__(self, name, arr)

    @property
    def times(self):
        return self.dt * np.arange(self.samples.shape[-2])

    @property
    def ensemble(self):
        return self.samples.shape[0] if self.samples.ndim == 3 else 1

    def member(self, i):
        """Single-member view of an ensemble trajectory."""
        if self.samples.ndim == 2:
            if i != 0:
                raise IndexError(i)
            return self
        pick = lambda a: None if a is None else a[i]
        return Trajectory(self.dt, self.samples[i], pick(self.velocities), pick(self.aux), dict(self.meta))


def mass_scale(model):
    """Return the equivalent unit-mass model.

    With ``M^{1/2}`` applied to coordinates, stiffness and damping become
    ``M^{-1/2} A M^{-1/2}`` and ``M^{-1/2} Gamma M^{-1/2}``. A model without
    masses is returned unchanged.
    """
    if model.masses is None:
        return model
    m = model.masses
    if np.any(m <= 0) or not np.all(np.isfinite(m)):
        raise ValidationError("masses must be positive and finite")
    s = 1.0 / np.sqrt(m)
    A = s[:, None] * model.A * s[None, :]
    G = s[:, None] * model.Gamma * s[None, :]
    return replace(model, A=0.5 * (A + A.T), Gamma=0.5 * (G + G.T), masses=None)


class CovarianceAccumulator:
    """Single-pass mean/covariance accumulation over row chunks."""

    def __init__(self, n):
        self.n = n
        self.count = 0
        self.mean = np.zeros(n)
        self.m2 = np.zeros((n, n))

    def update(self, rows):
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if rows.shape[1] != self.n:
            raise ValidationError(f"expected {self.n} columns, got {rows.shape[1]}")
        k = rows.shape[0]
        if k == 0:
            return
        mean_b = rows.mean(axis=0)
        centered = rows - mean_b
        m2_b = centered.T @ centered
        delta = mean_b - self.mean
        total = self.count + k
        self.m2 += m2_b + np.outer(delta, delta) * (self.count * k / total)
        self.mean += delta * (k / total)
        self.count = total

    def covariance(self):
        if self.count < 2:
            raise ValidationError("need at least two samples for a covariance")
        return self.m2 / self.count


def estimate_stiffness_from_covariance(traj, kBT, eig_floor=None, burn_in=0):
    """PCA estimate ``A = kBT (Cov + floor I)^{-1}`` from coordinate samples.

    Parameters
    ----------
    traj : Trajectory or array_like
        Coordinate samples, one row per time.
    kBT : float
    eig_floor : float, optional
        Regularizing floor added to the covariance; defaults to
        ``1e-8 * trace(Cov) / n``. Must be positive when given.
    burn_in : int
        Leading samples discarded before accumulating.
    """
    X = traj.samples if isinstance(traj, Trajectory) else np.atleast_2d(np.asarray(traj, dtype=float))
    if X.ndim == 3:
        X = X[:, burn_in:].reshape(-1, X.shape[-1])
    else:
        X = X[burn_in:]
    if X.shape[0] < 2:
        raise ValidationError("need at least two samples after burn-in")
    acc = CovarianceAccumulator(X.shape[1])
    acc.update(X)
    cov = acc.covariance()
    n = cov.shape[0]
    if eig_floor is None:
        eig_floor = 1e-8 * np.trace(cov) / n
        if eig_floor <= 0:
            raise ValidationError("degenerate covariance and no eigenvalue floor given")
    elif eig_floor <= 0:
        raise ValidationError("eig_floor must be positive")
    A = kBT * np.linalg.inv(cov + eig_floor * np.eye(n))
    return 0.5 * (A + A.T)


@dataclass
class ModelDiagnostics:
    ok: bool
    asymmetry_A: float
    asymmetry_Gamma: float
    min_eig_A: float
    min_eig_Gamma: float
    drift_abscissa: float
    problems: list

    def as_dict(self):
        return {
            "ok": self.ok,
            "asymmetry_A": self.asymmetry_A,
            "asymmetry_Gamma": self.asymmetry_Gamma,
            "min_eig_A": self.min_eig_A,
            "min_eig_Gamma": self.min_eig_Gamma,
            "drift_abscissa": self.drift_abscissa,
            "problems": list(self.problems),
        }


def validate_full_model(model, rtol=SPD_REL_TOL):
    """Check symmetry, A > 0 and Gamma >= 0; never raises."""
    problems = []
    A, G = model.A, model.Gamma
    nA = max(np.linalg.norm(A, 2), 1e-300)
    nG = max(np.linalg.norm(G, 2), 1e-300)
    asym_A = np.linalg.norm(A - A.T, 2) / nA
    asym_G = np.linalg.norm(G - G.T, 2) / nG if np.any(G) else 0.0
    if asym_A > rtol:
        problems.append(f"A is not symmetric (relative defect {asym_A:.2e})")
    if asym_G > rtol:
        problems.append(f"Gamma is not symmetric (relative defect {asym_G:.2e})")
    min_A = float(np.linalg.eigvalsh(0.5 * (A + A.T))[0])
    min_G = float(np.linalg.eigvalsh(0.5 * (G + G.T))[0])
    if min_A <= rtol * nA:
        problems.append(f"A is not positive definite (min eigenvalue {min_A:.3e})")
    if min_G < -rtol * nG:
        problems.append(f"Gamma is not positive semidefinite (min eigenvalue {min_G:.3e})")
    if model.kBT < 0:
        problems.append("kBT is negative")
    if model.masses is not None and np.any(model.masses <= 0):
        problems.append("nonpositive mass")
    return ModelDiagnostics(
        ok=not problems,
        asymmetry_A=float(asym_A),
        asymmetry_Gamma=float(asym_G),
        min_eig_A=min_A,
        min_eig_Gamma=min_G,
        drift_abscissa=spectral_abscissa(model.drift()),
        problems=problems,
    )


def elastic_network_stiffness(positions, cutoff, spring=1.0, tether=0.0):
    """Anisotropic elastic-network Hessian for 3D `positions`.

    Every pair closer than `cutoff` is joined by a spring of constant `spring`.
    A `tether` (spring to the lab frame on each coordinate) removes the six
    rigid-body zero modes.
    """
    pos = np.asarray(positions, dtype=float)
    natoms = pos.shape[0]
    H = np.zeros((3 * natoms, 3 * natoms))
    for i in range(natoms):
        for j in range(i + 1, natoms):
            d = pos[j] - pos[i]
            r2 = d @ d
            if r2 > cutoff * cutoff:
                continue
            block = spring * np.outer(d, d) / r2
            si, sj = slice(3 * i, 3 * i + 3), slice(3 * j, 3 * j + 3)
            H[si, sj] -= block
            H[sj, si] -= block
            H[si, si] += block
            H[sj, sj] += block
    H += tether * np.eye(3 * natoms)
    return 0.5 * (H + H.T)


def random_globule_positions(natoms, rng, bond=1.0, pull=0.6, min_sep=0.8):
    """Compact self-avoiding random walk in 3D.

    Each step is a random unit direction biased toward the running centroid
    by `pull`; steps closer than ``min_sep * bond`` to an existing atom are
    rejected, so neighbouring atoms form well-connected rigid groups.
    """
    pos = [np.zeros(3)]
    while len(pos) < natoms:
        centroid = np.mean(pos, axis=0)
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        to_c = centroid - pos[-1]
        d = d + pull * to_c / max(np.linalg.norm(to_c), 1e-9)
        d /= np.linalg.norm(d)
        cand = pos[-1] + bond * d
        if min(np.linalg.norm(cand - q) for q in pos) > min_sep * bond:
            pos.append(cand)
    return np.array(pos)
