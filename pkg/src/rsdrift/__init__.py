"""Coupled simulation of a linear-bandit recommender and the user population it drifts."""

from .bandit import BanditTrajectory, run_simulation, simulate_step
from .equilibrium import (
    EquilibriumReport,
    check_tracking_condition,
    consensus_threshold,
    find_equilibrium,
    hyperplane_embed,
    polarization_sweep,
    single_user_fixed_points,
    stability_spectrum,
)
from .errors import (
    ConfigError,
    IntegrationError,
    InvalidArgumentError,
    NonConvergenceError,
    NumericError,
    RankError,
    RsDriftError,
    SingularMatrixError,
)
from .generic_sa import CoupledSystem, estimate_mean_drift, harmonic_time, run_sa
from .model import LearnerState, ModelConfig, NoiseSpec, PopulationState
from .ode import OdeState, OdeTrajectory, integrate, ode_rhs, overlay_error

__version__ = "0.1.0"
