"""Memory-reduced bilevel meta-learning optimizer and benchmark harness.

The optimizer runs K steps of lower-level gradient descent per task, solves
for the Hessian-inverse-vector product with warm-started matrix-free
conjugate gradient, and assembles the implicit hypergradient, so its memory
footprint does not grow with the inner iteration count. An
iterative-differentiation baseline (which must retain the whole inner
trajectory), a first-order baseline, and closed-form synthetic task families
make every convergence, accuracy, memory, and evaluation-count property
checkable at desk scale.
"""

from .cg import CgResult, CgState, cg_solve
from .core import (
    ConfigError,
    EvalCounters,
    NumericalError,
    ProblemConstants,
    TaskOracle,
    compute_cg_iteration_floor,
    compute_inner_iteration_floor,
    compute_smoothness_constant,
    merge_counters,
    rng_from,
    smoothness_constant,
    spd_solve_oracle,
)
from .estimator import MetaLearner
from .hypergrad import (
    HypergradientEstimate,
    LowerTrajectory,
    estimator_error,
    exact_estimate,
    first_order_estimate,
    implicit_estimate,
    itd_estimate,
)
from .optimizer import (
    MemoryReport,
    OuterConfig,
    RunRecord,
    epsilon_solution_check,
    lower_solve,
    memory_report,
    run_algorithm1,
    run_loop,
)
from .tasks import (
    BiasedGradOracle,
    NoisyOracle,
    QuadraticTask,
    SinusoidTask,
    TaskFamily,
    build_family,
    gradcheck,
    load_family,
    make_quadratic_family,
    make_sinusoid_family,
    noisy_wrap,
    quadratic_exact_hypergradient,
    save_family,
)

__version__ = "0.1.0"

__all__ = [
    "BiasedGradOracle",
    "CgResult",
    "CgState",
    "ConfigError",
    "EvalCounters",
    "HypergradientEstimate",
    "LowerTrajectory",
    "MemoryReport",
    "MetaLearner",
    "NoisyOracle",
    "NumericalError",
    "OuterConfig",
    "ProblemConstants",
    "QuadraticTask",
    "RunRecord",
    "SinusoidTask",
    "TaskFamily",
    "TaskOracle",
    "build_family",
    "cg_solve",
    "compute_cg_iteration_floor",
    "compute_inner_iteration_floor",
    "compute_smoothness_constant",
    "epsilon_solution_check",
    "estimator_error",
    "exact_estimate",
    "first_order_estimate",
    "gradcheck",
    "implicit_estimate",
    "itd_estimate",
    "load_family",
    "lower_solve",
    "make_quadratic_family",
    "make_sinusoid_family",
    "memory_report",
    "merge_counters",
    "noisy_wrap",
    "quadratic_exact_hypergradient",
    "rng_from",
    "smoothness_constant",
    "run_algorithm1",
    "run_loop",
    "save_family",
    "spd_solve_oracle",
]
