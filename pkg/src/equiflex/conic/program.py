"""Solver-agnostic mixed-integer second-order-cone program model.

A :class:`ConicProgram` collects variables (continuous or binary), tagged
linear constraints, second-order / rotated-second-order cones, and a linear
minimization objective.  Programs are built incrementally, sealed, and handed
to a backend (see :mod:`equiflex.conic.backends`) or to the branch-and-bound
layer (:mod:`equiflex.conic.bnb`).

The plain-text dump format (:func:`dump_program` / :func:`parse_program`)
serializes a program losslessly (floats via ``repr``) for cross-checking
against external tools.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

CONTINUOUS = "continuous"
BINARY = "binary"

_SENSES = ("==", "<=", ">=")
_SENSE_WORDS = {"==": "eq", "<=": "le", ">=": "ge"}
_WORD_SENSES = {w: s for s, w in _SENSE_WORDS.items()}


class ProgramError(ValueError):
    """Structural misuse of a ConicProgram (duplicate names, bad bounds, ...)."""


def _check_token(text: str, what: str) -> str:
    if not text or any(ch.isspace() for ch in text) or "*" in text:
        raise ProgramError(f"{what} {text!r} must be non-empty without whitespace or '*'")
    return text


@dataclass(frozen=True)
class VariableRef:
    """Handle to one decision variable."""

    id: int
    name: str
    kind: str
    lower: float
    upper: float

    # Arithmetic sugar so model code reads like algebra.
    def __add__(self, other):
        return LinExpr.of(self) + other

    def __radd__(self, other):
        return LinExpr.of(self) + other

    def __sub__(self, other):
        return LinExpr.of(self) - other

    def __rsub__(self, other):
        return (-1.0) * self + other

    def __mul__(self, coef: float):
        return LinExpr({self.id: float(coef)}, 0.0)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0


class LinExpr:
    """Sparse affine expression ``sum(coef * var) + const``."""

    __slots__ = ("terms", "const")

    def __init__(self, terms: Mapping[int, float] | None = None, const: float = 0.0):
        self.terms: dict[int, float] = dict(terms or {})
        self.const = float(const)

    @staticmethod
    def of(item) -> "LinExpr":
        if isinstance(item, LinExpr):
            return LinExpr(item.terms, item.const)
        if isinstance(item, VariableRef):
            return LinExpr({item.id: 1.0}, 0.0)
        return LinExpr({}, float(item))

    def __add__(self, other):
        out = LinExpr.of(self)
        rhs = LinExpr.of(other)
        for vid, coef in rhs.terms.items():
            out.terms[vid] = out.terms.get(vid, 0.0) + coef
        out.const += rhs.const
        return out

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-1.0) * LinExpr.of(other)

    def __rsub__(self, other):
        return (-1.0) * self + other

    def __mul__(self, coef: float):
        coef = float(coef)
        return LinExpr({v: c * coef for v, c in self.terms.items()}, self.const * coef)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def compact(self) -> "LinExpr":
        """Drop exact-zero coefficients."""
        return LinExpr({v: c for v, c in self.terms.items() if c != 0.0}, self.const)


@dataclass(frozen=True)
class LinearConstraint:
    """One tagged linear row: ``terms (sense) rhs`` with constants folded."""

    index: int
    tag: str
    terms: tuple[tuple[int, float], ...]
    sense: str
    rhs: float


@dataclass(frozen=True)
class Cone:
    """A (rotated) second-order cone over ordered affine member expressions.

    kind "soc": members (t, x1..xk) meaning t >= ||x||.
    kind "rsoc": members (u, v, x1..xk) meaning 2uv >= ||x||^2 with u, v >= 0.
    ``relaxation`` marks cones that stand in for a relaxed quadratic equality,
    whose tightness is audited by :func:`soc_exactness`.
    """

    index: int
    kind: str
    members: tuple[LinExpr, ...]
    tag: str
    relaxation: bool


class ConicProgram:
    """Mutable-until-sealed MISOCP container."""

    def __init__(self) -> None:
        self.variables: list[VariableRef] = []
        self.constraints: list[LinearConstraint] = []
        self.cones: list[Cone] = []
        self.objective_terms: dict[int, float] = {}
        self.objective_const: float = 0.0
        self._names: set[str] = set()
        self._tags: set[str] = set()
        self._sealed = False

    # -- construction ------------------------------------------------------

    def _check_open(self) -> None:
        if self._sealed:
            raise ProgramError("program is sealed; no further modification allowed")

    def add_variable(
        self,
        name: str,
        kind: str = CONTINUOUS,
        lower: float = -math.inf,
        upper: float = math.inf,
    ) -> VariableRef:
        self._check_open()
        _check_token(name, "variable name")
        if name in self._names:
            raise ProgramError(f"duplicate variable name {name!r}")
        if kind not in (CONTINUOUS, BINARY):
            raise ProgramError(f"unknown variable kind {kind!r}")
        lower, upper = float(lower), float(upper)
        if kind == BINARY:
            lower = 0.0 if lower == -math.inf else lower
            upper = 1.0 if upper == math.inf else upper
            if lower < 0.0 or upper > 1.0:
                raise ProgramError(f"binary variable {name!r} bounds must lie in [0, 1]")
        if lower > upper:
            raise ProgramError(f"variable {name!r} has inverted bounds [{lower}, {upper}]")
        ref = VariableRef(id=len(self.variables), name=name, kind=kind, lower=lower, upper=upper)
        self.variables.append(ref)
        self._names.add(name)
        return ref

    def _coerce_terms(self, expr) -> LinExpr:
        e = LinExpr.of(expr).compact()
        for vid in e.terms:
            if not (0 <= vid < len(self.variables)):
                raise ProgramError(f"expression references unknown variable id {vid}")
        return e

    def add_linear(self, expr, sense: str, rhs: float, tag: str) -> LinearConstraint:
        """Add ``expr (sense) rhs``; any constant in ``expr`` folds into rhs."""
        self._check_open()
        if sense not in _SENSES:
            raise ProgramError(f"sense must be one of {_SENSES}, got {sense!r}")
        _check_token(tag, "constraint tag")
        if tag in self._tags:
            raise ProgramError(f"duplicate constraint tag {tag!r}")
        e = self._coerce_terms(expr)
        if not e.terms:
            raise ProgramError(f"constraint {tag!r} has no variable terms")
        row = LinearConstraint(
            index=len(self.constraints),
            tag=tag,
            terms=tuple(sorted(e.terms.items())),
            sense=sense,
            rhs=float(rhs) - e.const,
        )
        self.constraints.append(row)
        self._tags.add(tag)
        return row

    def add_soc(self, members: Sequence, tag: str, relaxation: bool = False) -> Cone:
        """Add t >= ||x|| over members (t, x1..xk)."""
        return self._add_cone("soc", members, tag, relaxation, min_dim=2)

    def add_rsoc(self, u, v, members: Sequence, tag: str, relaxation: bool = False) -> Cone:
        """Add 2uv >= ||x||^2, u,v >= 0 over members (u, v, x1..xk)."""
        return self._add_cone("rsoc", [u, v, *members], tag, relaxation, min_dim=3)

    def _add_cone(self, kind, members, tag, relaxation, min_dim) -> Cone:
        self._check_open()
        _check_token(tag, "cone tag")
        if tag in self._tags:
            raise ProgramError(f"duplicate constraint tag {tag!r}")
        exprs = tuple(self._coerce_terms(m) for m in members)
        if len(exprs) < min_dim:
            raise ProgramError(f"{kind} cone {tag!r} needs >= {min_dim} members, got {len(exprs)}")
        cone = Cone(index=len(self.cones), kind=kind, members=exprs, tag=tag, relaxation=relaxation)
        self.cones.append(cone)
        self._tags.add(tag)
        return cone

    def set_objective(self, expr) -> None:
        """Set the (minimized) linear objective."""
        self._check_open()
        e = self._coerce_terms(expr)
        self.objective_terms = dict(e.terms)
        self.objective_const = e.const

    def seal(self) -> "ConicProgram":
        self._sealed = True
        return self

    # -- inspection --------------------------------------------------------

    @property
    def sealed(self) -> bool:
        return self._sealed

    @property
    def binaries(self) -> tuple[VariableRef, ...]:
        return tuple(v for v in self.variables if v.kind == BINARY)

    def constraint_by_tag(self, tag: str) -> LinearConstraint:
        for row in self.constraints:
            if row.tag == tag:
                return row
        raise KeyError(f"no constraint tagged {tag!r}")

    def objective_value_at(self, x: np.ndarray) -> float:
        return float(
            sum(c * x[v] for v, c in self.objective_terms.items()) + self.objective_const
        )


@dataclass(frozen=True, eq=False)
class ConicSolution:
    """Primal-dual result of one continuous conic solve.

    Linear-constraint duals follow the sensitivity convention: for a row
    ``a.x (sense) b`` the reported dual equals d(objective)/d(b) — positive
    when tightening an equality upward raises cost.  ``status`` is one of
    "optimal", "infeasible", "unbounded", "iteration-limit".
    """

    status: str
    primal: np.ndarray
    objective_value: float
    gap: float
    iterations: int
    row_duals: dict[str, float]
    cone_duals: dict[str, np.ndarray]
    certificate: np.ndarray | None = None
    solve_time: float = 0.0

    def value(self, item) -> float:
        """Evaluate a variable or affine expression at the primal point."""
        e = LinExpr.of(item)
        return float(sum(c * self.primal[v] for v, c in e.terms.items()) + e.const)

    def dual(self, tag: str) -> float:
        return self.row_duals[tag]


@dataclass(frozen=True)
class ConeSlack:
    """Tightness report entry for one cone."""

    tag: str
    kind: str
    relaxation: bool
    slack: float
    inexact: bool


@dataclass(frozen=True)
class ExactnessReport:
    """SOC-relaxation tightness audit over a solution's cones."""

    cones: tuple[ConeSlack, ...]
    max_relaxation_slack: float

    @property
    def inexact_tags(self) -> tuple[str, ...]:
        return tuple(c.tag for c in self.cones if c.inexact)

    @property
    def all_exact(self) -> bool:
        return not self.inexact_tags


def soc_exactness(
    program: ConicProgram, solution: ConicSolution, exactness_tol: float = 1e-6
) -> ExactnessReport:
    """Audit cone tightness at ``solution``.

    For "soc" cones the slack is t^2 - ||x||^2; for "rsoc" cones 2uv - ||x||^2
    (for the branch-flow cone this equals the current-voltage product minus
    the squared apparent flow).  Cones carrying ``relaxation=True`` with slack
    above ``exactness_tol`` are flagged inexact.
    """
    if solution.status != "optimal":
        raise ProgramError(f"exactness audit requires an optimal solution, got {solution.status}")
    entries = []
    worst = 0.0
    for cone in program.cones:
        values = [solution.value(m) for m in cone.members]
        if cone.kind == "soc":
            slack = values[0] ** 2 - sum(v * v for v in values[1:])
        else:
            slack = 2.0 * values[0] * values[1] - sum(v * v for v in values[2:])
        inexact = cone.relaxation and slack > exactness_tol
        entries.append(
            ConeSlack(tag=cone.tag, kind=cone.kind, relaxation=cone.relaxation,
                      slack=slack, inexact=inexact)
        )
        if cone.relaxation:
            worst = max(worst, slack)
    return ExactnessReport(cones=tuple(entries), max_relaxation_slack=worst)


# ---------------------------------------------------------------------------
# Lossless text dump
# ---------------------------------------------------------------------------


def _fmt_bound(v: float) -> str:
    if v == math.inf:
        return "inf"
    if v == -math.inf:
        return "-inf"
    return repr(v)


def _fmt_terms(program: ConicProgram, terms: Iterable[tuple[int, float]]) -> str:
    parts = [f"{repr(c)}*{program.variables[v].name}" for v, c in sorted(terms)]
    return " ".join(parts)


def dump_program(program: ConicProgram) -> str:
    """Serialize ``program`` to the documented plain-text conic format."""
    lines = ["conic-program v1", "minimize"]
    for v in program.variables:
        lines.append(f"var {v.name} {v.kind} {_fmt_bound(v.lower)} {_fmt_bound(v.upper)}")
    obj = _fmt_terms(program, program.objective_terms.items())
    lines.append(f"obj {repr(program.objective_const)} {obj}".rstrip())
    for row in program.constraints:
        lines.append(
            f"row {row.tag} {_SENSE_WORDS[row.sense]} {repr(row.rhs)} "
            f"{_fmt_terms(program, row.terms)}"
        )
    for cone in program.cones:
        lines.append(f"cone {cone.kind} {int(cone.relaxation)} {cone.tag}")
        for m in cone.members:
            lines.append(f"  m {repr(m.const)} {_fmt_terms(program, m.terms.items())}".rstrip())
    lines.append("end")
    return "\n".join(lines) + "\n"


def _parse_terms(tokens: list[str], names: dict[str, VariableRef], where: str) -> dict[int, float]:
    terms: dict[int, float] = {}
    for tok in tokens:
        coef_str, _, name = tok.partition("*")
        if not name or name not in names:
            raise ProgramError(f"{where}: bad term {tok!r}")
        terms[names[name].id] = terms.get(names[name].id, 0.0) + float(coef_str)
    return terms


def parse_program(text: str) -> ConicProgram:
    """Parse the text produced by :func:`dump_program` (lossless inverse)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 3 or lines[0] != "conic-program v1" or lines[1] != "minimize":
        raise ProgramError("not a conic-program v1 document")
    if lines[-1] != "end":
        raise ProgramError("missing 'end' terminator")
    program = ConicProgram()
    names: dict[str, VariableRef] = {}
    i = 2
    n = len(lines) - 1
    pending_cone: tuple[str, bool, str, list[LinExpr]] | None = None

    def flush_cone():
        nonlocal pending_cone
        if pending_cone is not None:
            kind, relax, tag, members = pending_cone
            program._add_cone(kind, members, tag, relax, min_dim=2 if kind == "soc" else 3)
            pending_cone = None

    while i < n:
        line = lines[i]
        tokens = line.split()
        head = tokens[0]
        if head == "var":
            name, kind, lb, ub = tokens[1], tokens[2], float(tokens[3]), float(tokens[4])
            names[name] = program.add_variable(name, kind, lb, ub)
        elif head == "obj":
            const = float(tokens[1])
            terms = _parse_terms(tokens[2:], names, "obj")
            program.objective_terms = terms
            program.objective_const = const
        elif head == "row":
            tag, sense, rhs = tokens[1], _WORD_SENSES[tokens[2]], float(tokens[3])
            terms = _parse_terms(tokens[4:], names, f"row {tag}")
            program.add_linear(LinExpr(terms), sense, rhs, tag)
        elif head == "cone":
            flush_cone()
            pending_cone = (tokens[1], bool(int(tokens[2])), tokens[3], [])
        elif head == "m":
            if pending_cone is None:
                raise ProgramError("member line outside a cone block")
            const = float(tokens[1])
            terms = _parse_terms(tokens[2:], names, "cone member")
            pending_cone[3].append(LinExpr(terms, const))
        else:
            raise ProgramError(f"unrecognized line: {line!r}")
        i += 1
    flush_cone()
    return program
