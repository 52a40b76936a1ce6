"""Monte-Carlo solution of LQ stochastic control through a time-reversed FBSDE."""

from .ensemble_stats import (
    MomentSchedule,
    estimate_moments,
    fit_gain,
    follmer_drift_gaussian,
    moment_schedule,
    regularized_inverse,
)
from .experiment import (
    ConfigError,
    ExperimentConfig,
    compare_oracle,
    load_config,
    preset_config,
    run_experiment,
)
from .lq_model import (
    AffineControlLaw,
    GainSchedule,
    LqProblem,
    affine_gain_odes,
    cost_estimate,
    hamiltonian,
    hamiltonian_du,
    optimal_cost_oracle,
    optimal_feedback,
    riccati_solve,
)
from .sde_core import (
    Ensemble,
    NumericalError,
    TimeGrid,
    WienerEnsemble,
    backward_integral,
    backward_euler_step,
    forward_euler_step,
    make_grid,
    reversal_transform,
    sample_wiener,
)
from .solver import SolverConfig, SolverOutput, solve

__version__ = "0.1.0"
