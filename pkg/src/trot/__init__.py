"""Tsallis-regularized optimal transport and ecological inference."""

from .core import (
    DualCertificate,
    GibbsKernel,
    QParams,
    TransportPlan,
    TransportProblem,
    beta_adjusted_distance,
    build_gibbs_kernel,
    escort_divergence_objective,
    escort_offset,
    kkt_form_residual,
    recover_duals,
    trot_objective,
)
from .qmath import (
    gibbs_weight,
    q_exp,
    q_log,
    tsallis_entropy,
    tsallis_relative_entropy,
)
from .solvers import SolverConfig, SolveTrace, StepSchedule, solve

__version__ = "0.1.0"
