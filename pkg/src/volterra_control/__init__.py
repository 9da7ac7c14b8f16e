"""Optimal feedback control of stochastic Volterra equations with completely
monotone kernels, through a finite Markovian state-space lift."""

from .errors import (
    ApproximationError,
    BlowUpError,
    ConditioningError,
    ConfigError,
    DomainError,
    LinearSolveError,
    NumericError,
    VolterraControlError,
)
from .kernel import (
    BernsteinKernel,
    HypothesisReport,
    bernstein_density,
    check_hypotheses,
    discretize,
    estimate_singularity_index,
    evaluate,
    laplace,
    make_discrete,
    make_exponential,
    make_fractional,
    singularity_index,
)
from .lift import DiscreteLift, History, OperatorA, choose_exponents, fractional_power
from .forward import (
    Constants,
    ControlSet,
    PathBundle,
    ProblemSpec,
    brownian,
    initial_u,
    reference_volterra_solve,
    simulate,
    simulate_from_state,
    step,
    uniform_grid,
    volterra_residual,
)
from .sensitivity import (
    JqvReport,
    MalliavinSlice,
    VariationalFlow,
    joint_quadratic_variation,
    malliavin_derivative,
    variational_correction,
    variational_flow,
)
from .control import (
    FeedbackPolicy,
    HamiltonianResult,
    VerificationReport,
    bangbang_adversaries,
    cost,
    feedback_policy,
    hamiltonian,
    verify_fundamental_relation,
)
from .bsde import (
    BsdeSolution,
    HjbResidualReport,
    ZIdentReport,
    grad_value_direction,
    hjb_residual,
    solve_bsde,
    u_trace,
    z_identification_check,
)

__version__ = "0.1.0"
