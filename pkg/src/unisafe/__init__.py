"""Smooth universal formulas for safe control, plus learned approximations.

The package solves, at each state, a strictly convex program whose
unique minimizer is a safe feedback input compatible with a family of
affine constraints (control Lyapunov / control barrier conditions), and
provides the tooling around it: feasibility certification, a min-norm
QP baseline, closed-loop simulation, and small neural networks trained
to imitate the minimizer on a normalized parameter box.
"""

from .errors import (
    DomainError,
    FormatError,
    InfeasibleError,
    SchemaError,
    TrainingDivergedError,
    UnisafeError,
)
from .objective import (
    WeightVector,
    eval_J,
    eval_J_scaled,
    eval_J_weighted,
    evaluate,
    grad_J,
    hess_J,
)
from .nn import (
    Dataset,
    MlpModel,
    TrainConfig,
    TrainResult,
    flatten_scaled,
    init_model,
    input_width,
    load_dataset,
    load_model,
    mlp_forward,
    nn_controller,
    sample_dataset,
    save_dataset,
    save_model,
    train,
    unflatten_scaled,
    warmstart_solve,
)
from .params import (
    ConstraintParams,
    FeasibilityCertificate,
    FeasibilityOutcome,
    FeasibilityStatus,
    ScaledParams,
    find_interior_point,
    margins,
    scale_params,
)
from .qp import ActiveSetState, project_onto_polytope, project_with_state, solve_min_norm_qp
from .sim import (
    ControlAffineSystem,
    ControlProblem,
    Trajectory,
    TrajectoryMetrics,
    cbf_constraint,
    clf_constraint,
    default_obstacles_2d,
    exact_controller,
    make_example_1,
    make_example_2,
    qp_controller,
    read_trajectory_csv,
    sample_obstacles_10d,
    simulate,
    simulate_interconnection,
    trajectory_metrics,
    write_trajectory_csv,
)
from .solver import (
    SolveResult,
    SolveStatus,
    SolverOptions,
    closed_form_1d,
    solve_exact,
    solve_gradient_flow,
    u_star,
)

__version__ = "0.1.0"

__all__ = [
    "ActiveSetState",
    "ConstraintParams",
    "ControlAffineSystem",
    "ControlProblem",
    "Dataset",
    "DomainError",
    "FeasibilityCertificate",
    "FeasibilityOutcome",
    "FeasibilityStatus",
    "FormatError",
    "InfeasibleError",
    "MlpModel",
    "ScaledParams",
    "SchemaError",
    "SolveResult",
    "SolveStatus",
    "SolverOptions",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "Trajectory",
    "TrajectoryMetrics",
    "UnisafeError",
    "WeightVector",
    "cbf_constraint",
    "clf_constraint",
    "closed_form_1d",
    "default_obstacles_2d",
    "eval_J",
    "eval_J_scaled",
    "eval_J_weighted",
    "evaluate",
    "exact_controller",
    "find_interior_point",
    "flatten_scaled",
    "grad_J",
    "hess_J",
    "init_model",
    "input_width",
    "load_dataset",
    "load_model",
    "make_example_1",
    "make_example_2",
    "margins",
    "mlp_forward",
    "nn_controller",
    "project_onto_polytope",
    "project_with_state",
    "qp_controller",
    "read_trajectory_csv",
    "sample_dataset",
    "sample_obstacles_10d",
    "save_dataset",
    "save_model",
    "scale_params",
    "simulate",
    "simulate_interconnection",
    "solve_exact",
    "solve_gradient_flow",
    "solve_min_norm_qp",
    "train",
    "trajectory_metrics",
    "u_star",
    "unflatten_scaled",
    "warmstart_solve",
    "write_trajectory_csv",
]
