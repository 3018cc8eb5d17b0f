"""Policy optimization for quadratic control of Markov jump linear systems."""

__version__ = "0.1.0"

from .errors import (
    CertificationViolation,
    ModelFormatError,
    ModelValidationError,
    NotConverged,
    NotMeanSquareStable,
    RadiusNotConverged,
)
from .model import (
    CoupledValue,
    GradientBundle,
    MjlsModel,
    Policy,
    StateCorrelation,
    generate_random_model,
    load_model,
    load_policy,
    save_model,
    save_policy,
    validate_model,
)
from .policy_opt import (
    ConvergenceReport,
    OptimizerConfig,
    Reference,
    check_almost_smoothness,
    check_cost_lower_bound,
    check_gradient_domination,
    cost,
    gain_residuals,
    max_step,
    mu,
    optimize,
    policy_gradient,
    reference_solution,
    step_gauss_newton,
    step_natural_pg,
    step_vanilla_pg,
    verify_rate_bound,
)
from .stability import (
    SolverConfig,
    is_ms_stabilizing,
    mode_expectation,
    ms_spectral_radius,
    solve_coupled_lyapunov,
    solve_coupled_riccati,
    solve_state_correlation,
)
