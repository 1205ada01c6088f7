"""Mixed-integer second-order-cone programming layer.

Public surface: the program model (:class:`ConicProgram` and friends), the
continuous solve (:func:`solve_relaxation` with pluggable backends), the
branch-and-bound driver (:func:`solve_mixed_integer`), dual recovery for
mixed-integer solutions (:func:`refix_and_dualize`), and the relaxation
tightness audit (:func:`soc_exactness`).
"""

from .backends import (
    DEFAULT_BACKEND,
    StandardForm,
    Tolerances,
    compile_standard_form,
    get_backend,
    solve_relaxation,
)
from .bnb import BnbReport, MixedIntegerInfeasible, refix_and_dualize, solve_mixed_integer
from .program import (
    BINARY,
    CONTINUOUS,
    Cone,
    ConeSlack,
    ConicProgram,
    ConicSolution,
    ExactnessReport,
    LinExpr,
    LinearConstraint,
    ProgramError,
    VariableRef,
    dump_program,
    parse_program,
    soc_exactness,
)

__all__ = [
    "BINARY",
    "CONTINUOUS",
    "BnbReport",
    "Cone",
    "ConeSlack",
    "ConicProgram",
    "ConicSolution",
    "DEFAULT_BACKEND",
    "ExactnessReport",
    "LinExpr",
    "LinearConstraint",
    "MixedIntegerInfeasible",
    "ProgramError",
    "StandardForm",
    "Tolerances",
    "VariableRef",
    "compile_standard_form",
    "dump_program",
    "get_backend",
    "parse_program",
    "refix_and_dualize",
    "soc_exactness",
    "solve_mixed_integer",
    "solve_relaxation",
]
