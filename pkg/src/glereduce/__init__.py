"""Coarse-grained generalized Langevin models from linear Langevin dynamics.

Typical use::

    from glereduce import FullModel, PartitionBasis, compute_blocks, compute_moments, fit
    blocks = compute_blocks(model, PartitionBasis.from_phi(Phi))
    reduced = fit(blocks, compute_moments(blocks, 4), order=2)
"""

from .basis import BlockAssignment, PartitionBasis, build_modal_basis, build_rtb_basis, complement_basis
from .correlation import CorrelationSeries, empirical_autocorrelation, vacf_full, vacf_reduced
from .errors import (
    FdtInfeasible,
    FitError,
    GLEError,
    NotPositiveSemidefinite,
    QuadratureError,
    SingularLyapunov,
    SingularMoment,
    SingularSystem,
    StabilityError,
    ValidationError,
)
from .model import FullModel, Trajectory, estimate_stiffness_from_covariance, mass_scale, validate_full_model
from .projection import KernelMoments, ProjectedBlocks, compute_blocks, compute_moments, eval_kernel, kernel_on_grid, t_star
from .reduction import ExtendedSystem, ReducedModel, assemble_extended, eval_approx_kernel, fit, fit_markovian, fit_rational
from .simulate import SimConfig, sample_stationary_initial, simulate_full, simulate_reduced

__version__ = "0.1.0"
