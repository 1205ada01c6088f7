"""Continuous conic solver backends behind a narrow contract.

The program model compiles to the standard form

    minimize    q'x
    subject to  A x + s = b,   s in K = Zero x Nonneg x SOC x ...

solved by a primal-dual interior-point method with a homogeneous self-dual
embedding (Clarabel by default, cvxopt's ``conelp`` as an alternative), which
yields primal-dual pairs and infeasibility certificates.  Rotated cones are
compiled to standard second-order cones via the isometry
(u, v, x) -> (u + v, u - v, sqrt(2) x).

Dual values are re-signed on extraction so that for every tagged row the
reported dual is d(objective)/d(rhs).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .program import Cone, ConicProgram, ConicSolution, LinExpr

logger = logging.getLogger(__name__)

_SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class Tolerances:
    """Solution acceptance tolerances (per-unit scale).

    feas_tol / gap_tol qualify continuous solves; int_tol / abs_gap drive
    branch-and-bound; exactness_tol flags loose relaxation cones.
    """

    feas_tol: float = 1e-8
    gap_tol: float = 1e-8
    int_tol: float = 1e-6
    abs_gap: float = 1e-6
    exactness_tol: float = 1e-6


@dataclass
class StandardForm:
    """Compiled matrices plus maps back to program rows and cones."""

    q: np.ndarray
    objective_const: float
    a_matrix: sp.csc_matrix
    b: np.ndarray
    n_zero: int
    n_nonneg: int
    soc_dims: list[int]
    # program constraint index -> (standard row, dual sign multiplier)
    constraint_rows: list[tuple[int, float]]
    # program cone index -> (first standard row, block dimension)
    cone_blocks: list[tuple[int, int]]

    @property
    def n_rows(self) -> int:
        return self.n_zero + self.n_nonneg + sum(self.soc_dims)


def compile_standard_form(
    program: ConicProgram, fixings: Mapping[int, float] | None = None
) -> StandardForm:
    """Compile ``program`` to standard form.

    Binary variables are treated as continuous within their [0, 1] box;
    ``fixings`` pins selected variables with equality rows (their box rows are
    dropped).
    """
    fixings = dict(fixings or {})
    n = len(program.variables)
    q = np.zeros(n)
    for vid, coef in program.objective_terms.items():
        q[vid] = coef

    rows_i: list[int] = []
    rows_j: list[int] = []
    rows_v: list[float] = []
    b: list[float] = []
    row = 0

    def emit(terms: Sequence[tuple[int, float]], rhs: float) -> int:
        nonlocal row
        for vid, coef in terms:
            rows_i.append(row)
            rows_j.append(vid)
            rows_v.append(coef)
        b.append(rhs)
        row += 1
        return row - 1

    constraint_rows: list[tuple[int, float]] = [(-1, 0.0)] * len(program.constraints)

    # Zero cone: program equalities, then fixing rows.
    for con in program.constraints:
        if con.sense == "==":
            constraint_rows[con.index] = (emit(con.terms, con.rhs), -1.0)
    for vid in sorted(fixings):
        emit([(vid, 1.0)], float(fixings[vid]))
    n_zero = row

    # Nonnegative cone: inequalities as b - Ax >= 0, then variable boxes.
    for con in program.constraints:
        if con.sense == "<=":
            constraint_rows[con.index] = (emit(con.terms, con.rhs), -1.0)
        elif con.sense == ">=":
            constraint_rows[con.index] = (
                emit([(v, -c) for v, c in con.terms], -con.rhs),
                1.0,
            )
    for var in program.variables:
        if var.id in fixings:
            continue
        if var.lower > -math.inf:
            emit([(var.id, -1.0)], -var.lower)
        if var.upper < math.inf:
            emit([(var.id, 1.0)], var.upper)
    n_nonneg = row - n_zero

    # Second-order cone blocks; members enter as s = const + terms.x.
    def emit_member(expr: LinExpr) -> None:
        emit([(v, -c) for v, c in expr.terms.items()], expr.const)

    soc_dims: list[int] = []
    cone_blocks: list[tuple[int, int]] = []
    for cone in program.cones:
        start = row
        if cone.kind == "soc":
            for m in cone.members:
                emit_member(m)
        else:  # rotated: (u, v, x) -> (u+v, u-v, sqrt(2) x)
            u, v = cone.members[0], cone.members[1]
            emit_member(u + v)
            emit_member(u - v)
            for m in cone.members[2:]:
                emit_member(_SQRT2 * m)
        dim = row - start
        soc_dims.append(dim)
        cone_blocks.append((start, dim))

    a_matrix = sp.csc_matrix(
        (rows_v, (rows_i, rows_j)), shape=(row, n), dtype=float
    )
    return StandardForm(
        q=q,
        objective_const=program.objective_const,
        a_matrix=a_matrix,
        b=np.asarray(b),
        n_zero=n_zero,
        n_nonneg=n_nonneg,
        soc_dims=soc_dims,
        constraint_rows=constraint_rows,
        cone_blocks=cone_blocks,
    )


@dataclass(frozen=True)
class RawResult:
    """Backend-native solve outcome in standard-form coordinates."""

    status: str
    x: np.ndarray
    z: np.ndarray
    iterations: int
    solve_time: float
    certificate: np.ndarray | None = None


class ClarabelBackend:
    """Interior-point conic solver (homogeneous self-dual embedding)."""

    name = "clarabel"

    def solve(self, form: StandardForm, tol: Tolerances) -> RawResult:
        import clarabel

        cones = []
        if form.n_zero:
            cones.append(clarabel.ZeroConeT(form.n_zero))
        if form.n_nonneg:
            cones.append(clarabel.NonnegativeConeT(form.n_nonneg))
        for dim in form.soc_dims:
            cones.append(clarabel.SecondOrderConeT(dim))

        settings = clarabel.DefaultSettings()
        settings.verbose = False
        # Solve tighter than the acceptance tolerances so downstream checks
        # at feas_tol/gap_tol pass with margin.
        settings.tol_gap_abs = min(1e-10, tol.gap_tol * 1e-2)
        settings.tol_gap_rel = min(1e-10, tol.gap_tol * 1e-2)
        settings.tol_feas = min(1e-9, tol.feas_tol * 1e-1)
        n = form.q.size
        p_matrix = sp.csc_matrix((n, n), dtype=float)
        solver = clarabel.DefaultSolver(
            p_matrix, form.q, form.a_matrix, form.b, cones, settings
        )
        result = solver.solve()
        status_name = str(result.status)
        x = np.asarray(result.x, dtype=float)
        z = np.asarray(result.z, dtype=float)
        if status_name in ("Solved", "SolverStatus.Solved"):
            status = "optimal"
            cert = None
        elif "PrimalInfeasible" in status_name:
            status = "infeasible"
            cert = z
        elif "DualInfeasible" in status_name:
            status = "unbounded"
            cert = x
        else:
            # AlmostSolved / MaxIterations / MaxTime / numerical trouble.
            status = "iteration-limit"
            cert = None
            logger.warning("clarabel terminated with %s", status_name)
        return RawResult(
            status=status,
            x=x,
            z=z,
            iterations=int(result.iterations),
            solve_time=float(result.solve_time),
            certificate=cert,
        )


class CvxoptBackend:
    """cvxopt ``conelp`` behind the same contract (optional dependency)."""

    name = "cvxopt"

    def solve(self, form: StandardForm, tol: Tolerances) -> RawResult:
        import cvxopt
        import cvxopt.solvers

        a_all = form.a_matrix.tocoo()
        mask_eq = a_all.row < form.n_zero
        mask_ineq = ~mask_eq

        def to_spmatrix(mask, row_offset, n_rows):
            return cvxopt.spmatrix(
                a_all.data[mask].tolist(),
                (a_all.row[mask] - row_offset).tolist(),
                a_all.col[mask].tolist(),
                (n_rows, form.q.size),
            )

        n_cone_rows = form.n_nonneg + sum(form.soc_dims)
        a_eq = to_spmatrix(mask_eq, 0, form.n_zero)
        g = to_spmatrix(mask_ineq, form.n_zero, n_cone_rows)
        b_eq = cvxopt.matrix(form.b[: form.n_zero])
        h = cvxopt.matrix(form.b[form.n_zero :])
        c = cvxopt.matrix(form.q)
        dims = {"l": form.n_nonneg, "q": list(form.soc_dims), "s": []}
        options = {
            "show_progress": False,
            "abstol": min(1e-9, tol.gap_tol * 1e-1),
            "reltol": min(1e-9, tol.gap_tol * 1e-1),
            "feastol": min(1e-9, tol.feas_tol * 1e-1),
            "maxiters": 200,
        }
        sol = cvxopt.solvers.conelp(c, g, h, dims, A=a_eq, b=b_eq, options=options)
        raw_status = sol["status"]
        x = np.zeros(form.q.size) if sol["x"] is None else np.asarray(sol["x"]).ravel()
        y = np.zeros(form.n_zero) if sol["y"] is None else np.asarray(sol["y"]).ravel()
        zc = (
            np.zeros(n_cone_rows)
            if sol["z"] is None
            else np.asarray(sol["z"]).ravel()
        )
        z = np.concatenate([y, zc])
        if raw_status == "optimal":
            status, cert = "optimal", None
        elif raw_status == "primal infeasible":
            status, cert = "infeasible", z
        elif raw_status == "dual infeasible":
            status, cert = "unbounded", x
        else:
            status, cert = "iteration-limit", None
        return RawResult(
            status=status, x=x, z=z, iterations=int(sol.get("iterations", 0)),
            solve_time=0.0, certificate=cert,
        )


_BACKENDS = {"clarabel": ClarabelBackend, "cvxopt": CvxoptBackend}
DEFAULT_BACKEND = "clarabel"


def get_backend(name: str | None = None):
    key = name or DEFAULT_BACKEND
    try:
        return _BACKENDS[key]()
    except KeyError:
        raise ValueError(f"unknown conic backend {key!r}; available: {sorted(_BACKENDS)}")


def solve_relaxation(
    program: ConicProgram,
    tolerances: Tolerances | None = None,
    backend: str | None = None,
    fixings: Mapping[int, float] | None = None,
) -> ConicSolution:
    """Solve the continuous relaxation of ``program``.

    Binaries relax to their [0, 1] box; ``fixings`` pins variables by id.
    Infeasibility and unboundedness are reported through ``status`` (with the
    solver certificate attached when available), never raised.
    """
    tol = tolerances or Tolerances()
    form = compile_standard_form(program, fixings)
    raw = get_backend(backend).solve(form, tol)

    if raw.status != "optimal":
        return ConicSolution(
            status=raw.status,
            primal=raw.x,
            objective_value=math.nan,
            gap=math.nan,
            iterations=raw.iterations,
            row_duals={},
            cone_duals={},
            certificate=raw.certificate,
            solve_time=raw.solve_time,
        )

    primal_obj = float(form.q @ raw.x) + form.objective_const
    dual_obj = float(-form.b @ raw.z) + form.objective_const
    gap = abs(primal_obj - dual_obj) / (1.0 + abs(primal_obj))
    row_duals = {
        con.tag: sign * float(raw.z[std_row])
        for con, (std_row, sign) in zip(program.constraints, form.constraint_rows)
    }
    cone_duals = {
        cone.tag: raw.z[start : start + dim].copy()
        for cone, (start, dim) in zip(program.cones, form.cone_blocks)
    }
    return ConicSolution(
        status="optimal",
        primal=raw.x,
        objective_value=primal_obj,
        gap=gap,
        iterations=raw.iterations,
        row_duals=row_duals,
        cone_duals=cone_duals,
        certificate=None,
        solve_time=raw.solve_time,
    )
