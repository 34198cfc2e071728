"""Backward parabolic equations on a box with homogeneous Dirichlet walls and
a non-local terminal condition, solved by Picard iteration on the terminal
value, with Monte-Carlo path verification and an analytic contraction bound."""

from .coefficients import (
    CoefficientBounds,
    CoefficientSet,
    DiffusionDecomposition,
    EllipticityReport,
    bounds,
    decompose,
    validate,
)
from .exprdsl import EvalError, Expr, ExprError, evaluate, parse, to_string
from .fixedpoint import (
    FeedbackMatrix,
    FixedPointDivergence,
    FixedPointReport,
    NonlocalSolution,
    assemble_feedback_matrix,
    solve_nonlocal,
    solve_nonlocal_direct,
)
from .grid import (
    Domain,
    Grid,
    GridError,
    SpaceField,
    SpaceTimeField,
    field_to_csv,
    make_grid,
    refine,
    sup_norm,
    weighted_l2_norm,
)
from .montecarlo import (
    CauchyProblem,
    ComparisonRow,
    ConfinementBound,
    McEstimate,
    PathConfig,
    compare_mc_pde,
    confinement_bound,
    confinement_probability,
    feynman_kac,
)
from .nonlocal_ops import (
    Convex,
    InitialValue,
    NonlocalReport,
    NonlocalValidationError,
    PointInTime,
    SpaceTimeKernel,
    TimeKernel,
    TwoPoint,
    apply_nonlocal,
    kernel_from_csv,
    truncation_check,
    validate_spec,
)
from .stepper import SolveOutput, solve_terminal, source_response, terminal_response

__version__ = "0.1.0"

__all__ = [
    "CauchyProblem",
    "CoefficientBounds",
    "CoefficientSet",
    "ComparisonRow",
    "ConfinementBound",
    "Convex",
    "DiffusionDecomposition",
    "Domain",
    "EllipticityReport",
    "EvalError",
    "Expr",
    "ExprError",
    "FeedbackMatrix",
    "FixedPointDivergence",
    "FixedPointReport",
    "Grid",
    "GridError",
    "InitialValue",
    "McEstimate",
    "NonlocalReport",
    "NonlocalSolution",
    "NonlocalValidationError",
    "PathConfig",
    "PointInTime",
    "SolveOutput",
    "SpaceField",
    "SpaceTimeField",
    "SpaceTimeKernel",
    "TimeKernel",
    "TwoPoint",
    "apply_nonlocal",
    "assemble_feedback_matrix",
    "bounds",
    "compare_mc_pde",
    "confinement_bound",
    "confinement_probability",
    "decompose",
    "evaluate",
    "feynman_kac",
    "field_to_csv",
    "kernel_from_csv",
    "make_grid",
    "parse",
    "refine",
    "solve_nonlocal",
    "solve_nonlocal_direct",
    "solve_terminal",
    "source_response",
    "sup_norm",
    "terminal_response",
    "to_string",
    "truncation_check",
    "validate",
    "validate_spec",
    "weighted_l2_norm",
]
