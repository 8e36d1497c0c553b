"""Coarse-grained subspace: rigid-block (RTB) and modal bases plus their complement."""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

ORTHO_TOL = 1e-10


@dataclass(frozen=True)
class PartitionBasis:
    """Orthonormal split ``R^n = range(Phi) (+) range(Psi)``."""

    Phi: np.ndarray
    Psi: np.ndarray

    def __post_init__(self):
        Phi = np.atleast_2d(np.asarray(self.Phi, dtype=float))
        Psi = np.asarray(self.Psi, dtype=float).reshape(Phi.shape[0], -1)
        if Phi.shape[1] >= Phi.shape[0]:
            raise ValidationError(f"CG dimension m={Phi.shape[1]} must be below n={Phi.shape[0]}")
        if Phi.shape[1] + Psi.shape[1] != Phi.shape[0]:
            raise ValidationError("Phi and Psi columns must add up to n")
        object.__setattr__(self, "Phi", Phi)
        object.__setattr__(self, "Psi", Psi)

    @classmethod
    def from_phi(cls, Phi):
        Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
        if Phi.shape[0] == 1:
            Phi = Phi.T
        return cls(Phi, complement_basis(Phi))

    @property
    def n(self):
        return self.Phi.shape[0]

    @property
    def m(self):
        return self.Phi.shape[1]

    def defects(self):
        """Max-norm defects of the four partition identities."""
        Phi, Psi = self.Phi, self.Psi
        return {
            "PhiT_Phi": float(np.max(np.abs(Phi.T @ Phi - np.eye(self.m)))),
            "PsiT_Psi": float(np.max(np.abs(Psi.T @ Psi - np.eye(Psi.shape[1])))),
            "PhiT_Psi": float(np.max(np.abs(Phi.T @ Psi))) if Psi.size else 0.0,
            "completeness": float(np.max(np.abs(Phi @ Phi.T + Psi @ Psi.T - np.eye(self.n)))),
        }

    def check(self, tol=ORTHO_TOL):
        bad = {k: v for k, v in self.defects().items() if v > tol}
        if bad:
            raise ValidationError(f"partition identities violated: {bad}")
        return self


@dataclass(frozen=True)
class BlockAssignment:
    """Atom-to-group map for rigid blocks.

    `groups` holds one group id per coordinate (x, y, z of an atom share it);
    `positions` holds one reference 3-vector per atom.
    """

    groups: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        groups = np.asarray(self.groups).astype(int).ravel()
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if groups.size != 3 * pos.shape[0]:
            raise ValidationError(f"{groups.size} coordinate labels for {pos.shape[0]} atoms")
        triplets = groups.reshape(-1, 3)
        if np.any(triplets != triplets[:, :1]):
            raise ValidationError("the three coordinates of an atom must share a group")
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "positions", pos)

    @classmethod
    def from_atom_groups(cls, atom_groups, positions):
        return cls(np.repeat(np.asarray(atom_groups, dtype=int), 3), positions)

    @property
    def atom_groups(self):
        return self.groups[::3]

    def group_ids(self):
        ids, first = np.unique(self.atom_groups, return_index=True)
        return ids[np.argsort(first)]


@dataclass
class RTBResult:
    Phi: np.ndarray
    modes_per_group: dict
    degenerate_groups: list


def _orthonormalize(vectors, tol):
    """Modified Gram-Schmidt in the given order, dropping dependent vectors."""
    kept = []
    for v in vectors:
        w = v.copy()
        ref = np.linalg.norm(v)
        for u in kept:
            w -= (u @ w) * u
        for u in kept:
            w -= (u @ w) * u
        nrm = np.linalg.norm(w)
        if ref == 0.0 or nrm <= tol * max(ref, 1.0):
            continue
        kept.append(w / nrm)
    return kept


def build_rtb_basis(assign, select=None, tol=1e-8):
    """Rotation-translation block basis, six columns per rigid group.

    For each group the three translations (unit axis on every atom) come
    first, followed by the rotations ``(r - centroid) x e_k`` about the
    unweighted centroid. A group whose atoms are collinear (or a single
    atom) loses the dependent rotations; such groups are listed in
    ``degenerate_groups``.

    Parameters
    ----------
    assign : BlockAssignment
    select : sequence of group ids, optional
        Restrict the basis to these groups (default: all, in order of
        first appearance).
    """
    n = assign.groups.size
    ids = assign.group_ids() if select is None else list(select)
    atom_groups = assign.atom_groups
    columns = []
    counts = {}
    degenerate = []
    for g in ids:
        atoms = np.flatnonzero(atom_groups == g)
        if atoms.size == 0:
            raise ValidationError(f"group {g} has no atoms")
        rel = assign.positions[atoms] - assign.positions[atoms].mean(axis=0)
        raw = []
        for k in range(3):
            v = np.zeros(n)
            v[3 * atoms + k] = 1.0
            raw.append(v)
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1.0
            v = np.zeros(n)
            v.reshape(-1, 3)[atoms] = np.cross(rel, e)
            raw.append(v)
        basis = _orthonormalize(raw, tol)
        counts[int(g)] = len(basis)
        if len(basis) < 6:
            degenerate.append(int(g))
        columns.extend(basis)
    Phi = np.column_stack(columns) if columns else np.zeros((n, 0))
    return RTBResult(Phi=Phi, modes_per_group=counts, degenerate_groups=degenerate)


def build_modal_basis(model, m):
    """The `m` eigenvectors of the stiffness with the smallest eigenvalues."""
    A = model.A if hasattr(model, "A") else np.asarray(model, dtype=float)
    n = A.shape[0]
    if not 0 < m < n:
        raise ValidationError(f"need 0 < m < n, got m={m}, n={n}")
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    Phi = V[:, :m].copy()
    return _fix_signs(Phi)


def _fix_signs(M, tol=1e-12):
    for j in range(M.shape[1]):
        col = M[:, j]
        nz = np.flatnonzero(np.abs(col) > tol * max(np.max(np.abs(col)), 1e-300))
        if nz.size and col[nz[0]] < 0:
            M[:, j] = -col
    return M


def complement_basis(Phi, tol=1e-10):
    """Orthonormal basis of the orthogonal complement of ``range(Phi)``.

    Uses a complete Householder QR; each column is signed so that its first
    significant entry is positive, which makes the output deterministic.
    """
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    n, m = Phi.shape
    if m >= n:
        raise ValidationError(f"Phi must have fewer columns than rows, got {Phi.shape}")
    defect = np.max(np.abs(Phi.T @ Phi - np.eye(m)))
    if defect > 1e-8:
        raise ValidationError(f"Phi is not orthonormal (defect {defect:.2e})")
    Q, R = np.linalg.qr(Phi, mode="complete")
    if np.min(np.abs(np.diag(R))) < tol:
        raise ValidationError("Phi is rank deficient")
    return _fix_signs(Q[:, m:].copy())
