"""Stochastic integration of the full and the embedded reduced Langevin systems.

Both systems share the structure ``q' = p``, ``p' = -K q + (linear in p, z)``,
so one splitting scheme serves both: a half kick by ``-K q``, a half drift
of ``q``, an exact Ornstein-Uhlenbeck step for the dissipative block
``y = (p, z)`` and the mirrored half drift and half kick.

Ensemble members draw from independent PCG64 streams spawned from the
configured seed, so results do not depend on how members are scheduled.
"""

import os
import time
import warnings
from dataclasses import dataclass

import numba
import numpy as np
import scipy.linalg as sla

from .errors import ValidationError
from .matops import factor_psd, sym
from .model import FullModel, Trajectory
from .reduction import ExtendedSystem, ReducedModel, assemble_extended

NOISE_CHUNK = 4096

if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


@dataclass(frozen=True)
class SimConfig:
    dt: float
    steps: int
    seed: int = 0
    ensemble: int = 1
    record_stride: int = 1
    record_aux: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ValidationError(f"dt must be positive, got {self.dt}")
        if int(self.steps) < 1:
            raise ValidationError("steps must be at least 1")
        if int(self.ensemble) < 1:
            raise ValidationError("ensemble must be at least 1")
        if int(self.record_stride) < 1:
            raise ValidationError("record_stride must be at least 1")
        if int(self.seed) < 0:
            raise ValidationError("seed must be nonnegative")


def worker_count():
    """Thread cap from ``GLE_THREADS`` (default: numba's own choice)."""
    raw = os.environ.get("GLE_THREADS")
    if not raw:
        return numba.config.NUMBA_NUM_THREADS
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValidationError(f"GLE_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ValidationError("GLE_THREADS must be at least 1")
    return min(n, numba.config.NUMBA_NUM_THREADS)


def member_generators(seed, count):
    """Independent generators, one per ensemble member."""
    children = np.random.SeedSequence(int(seed)).spawn(int(count))
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


@dataclass(frozen=True)
class _Layout:
    """Linear second-order system ``q' = p``, ``p' = -K q + ...``, ``y' = Kd y + noise``."""

    K: np.ndarray
    drift_y: np.ndarray
    noise_y: np.ndarray
    stationary: np.ndarray
    m: int

    @property
    def dim(self):
        return self.m + self.drift_y.shape[0]


def _layout(obj):
    if isinstance(obj, FullModel):
        if obj.masses is not None:
            raise ValidationError("simulation expects a unit-mass model; apply mass_scale first")
        n = obj.n
        return _Layout(
            K=obj.A, drift_y=-obj.Gamma, noise_y=2.0 * obj.kBT * sym(obj.Gamma),
            stationary=obj.stationary_covariance(), m=n,
        )
    if isinstance(obj, ReducedModel):
        obj = assemble_extended(obj)
    if isinstance(obj, ExtendedSystem):
        m = obj.m
        K = -obj.drift[m:2 * m, :m]
        return _Layout(K=K, drift_y=obj.drift[m:, m:], noise_y=obj.noise[m:, m:],
                       stationary=obj.stationary, m=m)
    raise ValidationError(f"cannot simulate an object of type {type(obj).__name__}")


def stationary_covariance(obj):
    return _layout(obj).stationary


def sample_stationary_initial(obj, seed=None, size=None):
    """Gaussian draw from the stationary law of a full or reduced model.

    The covariance is ``diag(kBT A^-1, kBT I)`` for a full model and
    ``diag(kBT A_eff^-1, kBT I, Qaux)`` for a reduced one.

    Parameters
    ----------
    obj : FullModel, ReducedModel or ExtendedSystem
    seed : int or numpy Generator
    size : int, optional
        Number of independent draws; a single vector when omitted.
    """
    S = stationary_covariance(obj)
    L = factor_psd(S)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shape = (S.shape[0],) if size is None else (int(size), S.shape[0])
    return rng.standard_normal(shape) @ L.T


def ou_step(drift, noise, h):
    """Exact one-step map of ``dy = drift y dt + dW``, ``Cov(dW) = noise dt``.

    Returns ``(F, Cov)`` with ``y(t+h) = F y(t) + N(0, Cov)``; ``Cov`` is the
    Van Loan integral ``int_0^h exp(s drift) noise exp(s drift^T) ds``.
    """
    r = drift.shape[0]
    V = np.zeros((2 * r, 2 * r))
    V[:r, :r] = -drift
    V[:r, r:] = noise
    V[r:, r:] = drift.T
    E = sla.expm(h * V)
    F = E[r:, r:].T
    cov = sym(F @ E[:r, r:])
    return F, cov


def _check_dt(K, dt):
    if K.size == 0:
        return
    wmax = np.sqrt(max(np.max(np.linalg.eigvalsh(sym(K))), 0.0))
    if dt * wmax >= 2.0:
        warnings.warn(f"dt*omega_max = {dt * wmax:.3g} >= 2: the kick-drift splitting is unstable")
    elif dt * wmax > 0.5:
        warnings.warn(f"dt*omega_max = {dt * wmax:.3g} > 0.5: expect visible discretization bias")


@numba.njit(parallel=True, cache=True)
def _advance(state, K, F, Lc, xi, h, stride, rec_idx, out, out_offset):
    """Advance every member through ``xi.shape[1]`` steps in place.

    ``xi[e, s]`` is the standard-normal input of step ``s`` of member ``e``;
    a snapshot of ``state[:, rec_idx]`` is written every `stride` steps
    into ``out[:, out_offset + ...]``.
    """
    E, dim = state.shape
    m = K.shape[0]
    r = dim - m
    nsteps = xi.shape[1]
    nrec = rec_idx.size
    for e in numba.prange(E):
        x = state[e].copy()
        y = np.empty(r)
        kick = np.empty(m)
        k = 0
        for s in range(nsteps):
            for i in range(m):
                acc = 0.0
                for j in range(m):
                    acc += K[i, j] * x[j]
                kick[i] = acc
            for i in range(m):
                x[m + i] -= 0.5 * h * kick[i]
            for i in range(m):
                x[i] += 0.5 * h * x[m + i]
            for i in range(r):
                acc = 0.0
                for j in range(r):
                    acc += F[i, j] * x[m + j]
                for j in range(i + 1):
                    acc += Lc[i, j] * xi[e, s, j]
                y[i] = acc
            for i in range(r):
                x[m + i] = y[i]
            for i in range(m):
                x[i] += 0.5 * h * x[m + i]
            for i in range(m):
                acc = 0.0
                for j in range(m):
                    acc += K[i, j] * x[j]
                x[m + i] -= 0.5 * h * acc
            k += 1
            if k == stride:
                k = 0
                slot = out_offset + (s + 1) // stride
                for i in range(nrec):
                    out[e, slot, i] = x[rec_idx[i]]
        state[e] = x


def _integrate(layout, cfg, initial=None):
    cfg_steps, stride = int(cfg.steps), int(cfg.record_stride)
    E, dim, m = int(cfg.ensemble), layout.dim, layout.m
    r = dim - m
    _check_dt(layout.K, cfg.dt)
    F, cov = ou_step(layout.drift_y, layout.noise_y, cfg.dt)
    Lc = factor_psd(cov) if r else np.zeros((0, 0))
    gens = member_generators(cfg.seed, E)
    if initial is None:
        Ls = factor_psd(layout.stationary)
        state = np.stack([Ls @ g.standard_normal(dim) for g in gens])
    else:
        state = np.array(np.broadcast_to(np.asarray(initial, dtype=float), (E, dim)))
    rec = np.arange(dim) if cfg.record_aux else np.arange(2 * m)
    nrec_t = cfg_steps // stride + 1
    out = np.empty((E, nrec_t, rec.size))
    out[:, 0] = state[:, rec]
    numba.set_num_threads(worker_count())
    done = 0
    chunk = max(stride, (NOISE_CHUNK // stride) * stride)
    started = time.perf_counter()
    while done < cfg_steps:
        nstep = min(chunk, cfg_steps - done)
        xi = np.stack([g.standard_normal((nstep, r)) for g in gens])
        _advance(state, layout.K, F, Lc, xi, cfg.dt, stride, rec, out, done // stride)
        done += nstep
    elapsed = time.perf_counter() - started
    q = out[:, :, :m]
    p = out[:, :, m:2 * m]
    aux = out[:, :, 2 * m:] if cfg.record_aux and dim > 2 * m else None
    if E == 1:
        q, p = q[0], p[0]
        aux = None if aux is None else aux[0]
    meta = {"seed": int(cfg.seed), "dt": float(cfg.dt), "steps": cfg_steps, "ensemble": E,
            "record_stride": stride, "wall_time": elapsed}
    return Trajectory(cfg.dt * stride, q, p, aux, meta)


def simulate_full(model, cfg, initial=None):
    """Integrate the full Langevin model.

    Starts from the Gibbs distribution unless `initial` (a ``(q, p)`` vector)
    is given. Returns a Trajectory with coordinates in `samples` and
    velocities in `velocities`; ensembles carry a leading member axis.
    """
    return _integrate(_layout(model), cfg, initial)


def simulate_reduced(reduced, cfg, initial=None):
    """Integrate the extended memoryless system ``(q, p, z-block)`` of a fit.

    With ``cfg.record_aux`` the auxiliary block is returned in ``aux``.
    """
    return _integrate(_layout(reduced), cfg, initial)


def simulate_colored_noise(reduced, cfg):
    """Auxiliary block alone with ``p`` frozen at 0.

    ``z_0`` is then the stationary colored force; its autocovariance is
    ``kBT theta_n(tau)``. Returns a Trajectory whose `samples` hold ``z_0``.
    """
    if reduced.order == 0:
        raise ValidationError("order 0 has no auxiliary block")
    N = reduced.aux_dim
    layout = _Layout(K=np.zeros((0, 0)), drift_y=reduced.Bhat, noise_y=reduced.Sigma_aux,
                     stationary=reduced.Qaux, m=0)
    cfg = SimConfig(cfg.dt, cfg.steps, cfg.seed, cfg.ensemble, cfg.record_stride, record_aux=True)
    traj = _integrate(layout, cfg)
    z = traj.aux if traj.aux is not None else traj.velocities
    z0 = z[..., N - reduced.m:N]
    return Trajectory(traj.dt, z0, meta=traj.meta)


# --- direct-convolution reference integrator --------------------------------


@numba.njit(cache=True, fastmath=True)
def _direct_convolution(K, D, theta, q0, p0, h, nsteps, R):
    """Semi-implicit Euler for ``p' = -K q - D p - int_0^t theta(t-s) p(s) ds + R``.

    The memory integral is the trapezoidal sum over the stored history, so
    step ``j`` costs ``O(j m^2)``. The kernel is stored time-reversed and
    flattened so that the sum is one contiguous matrix-vector product.
    """
    m = q0.size
    N = nsteps
    W = np.empty(((N + 1) * m, m))
    for l in range(N + 1):
        for i in range(m):
            for k in range(m):
                W[(N - l) * m + k, i] = theta[l, i, k]
    Pf = np.zeros((N + 1) * m)
    Q = np.zeros((N + 1, m))
    Pf[:m] = p0
    Q[0] = q0
    mem = np.zeros(m)
    for j in range(N):
        base = j * m
        mem[:] = 0.0
        if j > 0:
            for i in range(m):
                acc = 0.0
                for k in range(m):
                    acc += theta[0, i, k] * Pf[base + k] + theta[j, i, k] * Pf[k]
                mem[i] = 0.5 * acc
            if j > 1:
                # theta_{j-s}^T sits at row block N - j + s of W
                off = (N - j) * m
                mem += np.dot(Pf[m:base], W[off + m:off + base])
        for i in range(m):
            f = R[j, i] - h * mem[i]
            for k in range(m):
                f -= K[i, k] * Q[j, k] + D[i, k] * Pf[base + k]
            Pf[base + m + i] = Pf[base + i] + h * f
        for i in range(m):
            Q[j + 1, i] = Q[j, i] + h * Pf[base + m + i]
    return Q, Pf.reshape(N + 1, m)


def colored_noise_path(kernel_grid, kBT, rng):
    """Gaussian path ``R(t_j)`` with ``Cov(R(t_i), R(t_j)) = kBT theta(t_i - t_j)``.

    Built from the block-Toeplitz covariance and :func:`factor_psd`, so it is
    only meant for short grids.
    """
    nt, m, _ = kernel_grid.shape
    C = np.zeros((nt * m, nt * m))
    for i in range(nt):
        for j in range(nt):
            blk = kernel_grid[i - j] if i >= j else kernel_grid[j - i].T
            C[i * m:(i + 1) * m, j * m:(j + 1) * m] = blk
    L = factor_psd(kBT * sym(C), tol=1e-8)
    return (L @ rng.standard_normal(nt * m)).reshape(nt, m)


def direct_convolution_gle(A_eff, damping, kernel_grid, h, q0, p0, noise=None):
    """Reference GLE integrator with an explicit memory sum.

    Parameters
    ----------
    A_eff, damping : (m, m) arrays
    kernel_grid : (nsteps + 1, m, m) array
        ``theta(j h)`` for ``j = 0..nsteps``.
    h : float
    q0, p0 : (m,) arrays
    noise : (nsteps + 1, m) array, optional
        Combined random force per step; zero when omitted.

    Returns
    -------
    Q, P : (nsteps + 1, m) arrays
    """
    kernel_grid = np.ascontiguousarray(kernel_grid, dtype=float)
    nsteps = kernel_grid.shape[0] - 1
    m = kernel_grid.shape[1]
    R = np.zeros((nsteps + 1, m)) if noise is None else np.ascontiguousarray(noise, dtype=float)
    return _direct_convolution(
        np.ascontiguousarray(A_eff, dtype=float), np.ascontiguousarray(damping, dtype=float),
        kernel_grid, np.asarray(q0, dtype=float), np.asarray(p0, dtype=float), float(h), nsteps, R,
    )


@numba.njit(cache=True, fastmath=True)
def _extended_deterministic(Ldt, x0, nsteps, m, fdt):
    """Semi-implicit Euler on the extended drift; ``O(dim^2)`` per step.

    ``fdt`` is a constant force on ``p`` times the step size.
    """
    dim = x0.size
    x = x0.copy()
    P = np.zeros((nsteps + 1, m))
    P[0] = x0[m:2 * m]
    rhs = np.empty(dim)
    for j in range(nsteps):
        for i in range(m, dim):
            acc = 0.0
            for k in range(dim):
                acc += Ldt[i, k] * x[k]
            rhs[i] = acc
        for i in range(m, dim):
            x[i] += rhs[i]
        for i in range(m):
            x[m + i] += fdt[i]
        for i in range(m):
            x[i] += Ldt[i, m + i] * x[m + i]
        for i in range(m):
            P[j + 1, i] = x[m + i]
    return P


def extended_deterministic(reduced, h, nsteps, q0, p0, force=None):
    """Noise-free extended-system trajectory, the memoryless counterpart of
    :func:`direct_convolution_gle` (same semi-implicit Euler splitting).

    `force` is an optional constant force on ``p``. Returns the ``p`` path.
    """
    ext = assemble_extended(reduced)
    x0 = np.zeros(ext.dim)
    x0[ext.q_slice()] = q0
    x0[ext.p_slice()] = p0
    f = np.zeros(ext.m) if force is None else np.asarray(force, dtype=float)
    return _extended_deterministic(h * ext.drift, x0, int(nsteps), ext.m, h * f)


def _kernel_by_recursion(reduced, h, nsteps):
    """``theta_n(j h)`` for ``j = 0..nsteps`` by repeated multiplication with ``exp(h Bhat)``."""
    step = sla.expm(h * reduced.Bhat)
    out = np.empty((nsteps + 1, reduced.m, reduced.m))
    v = reduced.Chat.copy()
    for j in range(nsteps + 1):
        out[j] = v[-reduced.m:]
        v = step @ v
    return out


def benchmark(reduced, steps_list, h, repeats=3):
    """Wall time and operation counts: direct convolution vs extended system.

    Parameters
    ----------
    reduced : ReducedModel of order >= 1
        Supplies the kernel for the direct integrator and the extended drift.
    steps_list : iterable of int
    h : float
    repeats : int
        Best-of timing repeats per size.

    Returns
    -------
    rows : list of dict
        One row per step count with times, operation counts and their ratio.
    exponent : float
        Least-squares slope of ``log(time ratio)`` against ``log(steps)``.
    """
    m = reduced.m
    dim = 2 * m + reduced.aux_dim
    steps_list = [int(s) for s in steps_list]
    nmax = max(steps_list)
    if reduced.order < 1:
        raise ValidationError("the benchmark needs a fit of order >= 1")
    grid = _kernel_by_recursion(reduced, h, nmax)
    A = np.ascontiguousarray(reduced.A_eff, dtype=float)
    D = np.ascontiguousarray(reduced.damping, dtype=float)
    # a constant force keeps the state O(1); decayed states and kernel tails
    # would otherwise run into subnormal arithmetic
    grid[np.abs(grid) < 1e-200] = 0.0
    q0 = np.zeros(m)
    p0 = np.ones(m)
    force = np.ones(m)
    Ldt = h * assemble_extended(reduced).drift
    x0 = np.concatenate([q0, p0, np.zeros(reduced.aux_dim)])
    R = np.tile(force, (nmax + 1, 1))
    _direct_convolution(A, D, grid[:3], q0, p0, h, 2, R)
    _extended_deterministic(Ldt, x0, 2, m, h * force)
    rows = []
    for n in steps_list:
        g = np.ascontiguousarray(grid[:n + 1])
        td = min(_timed(lambda: _direct_convolution(A, D, g, q0, p0, h, n, R)) for _ in range(repeats))
        te = min(_timed(lambda: _extended_deterministic(Ldt, x0, n, m, h * force)) for _ in range(repeats))
        ops_direct = n * (n + 1) // 2 * m * m + n * 2 * m * m
        ops_ext = n * (dim - m) * dim + n * m
        rows.append({"steps": n, "direct_time": td, "extended_time": te, "time_ratio": td / te,
                     "direct_ops": ops_direct, "extended_ops": ops_ext, "ops_ratio": ops_direct / ops_ext,
                     "extended_time_per_step": te / n})
    if len(rows) >= 2:
        x = np.log([r["steps"] for r in rows])
        y = np.log([r["time_ratio"] for r in rows])
        exponent = float(np.polyfit(x, y, 1)[0])
    else:
        exponent = float("nan")
    return rows, exponent


def _timed(fn):
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0
