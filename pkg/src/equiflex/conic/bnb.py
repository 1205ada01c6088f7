"""Branch-and-bound over the binary variables of a conic program.

Best-first search (node bound, then insertion order), branching on the most
fractional binary with lowest-id tie-breaks, pruning nodes whose relaxation
bound cannot improve the incumbent by more than ``abs_gap``.  A rounding +
repair + refix heuristic seeds the incumbent at the root: interior-point
relaxations routinely return interior indicator values even when an integral
point of equal cost exists, and the heuristic lets the search prune
immediately in that common case.  Everything is deterministic: two runs on
identical inputs produce identical node counts and incumbents.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .backends import Tolerances, solve_relaxation
from .program import BINARY, ConicProgram, ConicSolution

logger = logging.getLogger(__name__)


class MixedIntegerInfeasible(RuntimeError):
    """No binary assignment admits a feasible continuous solution."""

    def __init__(self, message: str, certificate: np.ndarray | None = None):
        super().__init__(message)
        self.certificate = certificate


@dataclass(frozen=True, eq=False)
class BnbReport:
    """Outcome of :func:`solve_mixed_integer`.

    ``incumbent`` is the refixed continuous solution at ``fixed_binaries``
    (integral within int_tol); ``proven`` is False when the node limit cut
    the search short, in which case ``best_bound`` is the smallest open bound.
    """

    incumbent: ConicSolution
    fixed_binaries: dict[int, int]
    nodes_explored: int
    best_bound: float
    proven: bool


def refix_and_dualize(
    program: ConicProgram,
    binary_assignment: Mapping[int, int],
    tolerances: Tolerances | None = None,
    backend: str | None = None,
) -> ConicSolution:
    """Fix every binary per ``binary_assignment`` and re-solve continuously.

    This recovers well-defined duals for a mixed-integer solution: with the
    binaries pinned, the remaining program is a plain SOCP and every tagged
    row has a meaningful sensitivity.  Raises if the assignment misses a
    binary; an infeasible fixed program is reported via ``status``.
    """
    binaries = program.binaries
    missing = [v.name for v in binaries if v.id not in binary_assignment]
    if missing:
        raise ValueError(f"assignment does not cover binaries: {missing[:5]}")
    fixings = {v.id: float(round(binary_assignment[v.id])) for v in binaries}
    for vid, val in fixings.items():
        if val not in (0.0, 1.0):
            raise ValueError(f"binary {program.variables[vid].name} fixed to non-binary {val}")
    return solve_relaxation(program, tolerances, backend=backend, fixings=fixings)


def _binary_only_rows(program: ConicProgram) -> list:
    ids = {v.id for v in program.binaries}
    return [
        con
        for con in program.constraints
        if con.terms and all(vid in ids for vid, _ in con.terms)
    ]


def _repair(
    assignment: dict[int, int],
    rows,
    relax_value: Mapping[int, float],
) -> bool:
    """Greedy repair of binary-only rows; returns False when stuck.

    Only flips through positive-coefficient terms (which covers the
    exclusivity rows this exists for); anything it cannot fix simply fails
    the candidate — the refix solve is the real feasibility arbiter.
    """

    def row_value(con) -> float:
        return sum(c * assignment[v] for v, c in con.terms)

    for con in rows:
        if con.sense in ("<=", "=="):
            for _ in range(len(con.terms)):
                if row_value(con) <= con.rhs + 1e-9:
                    break
                # Clear the set binary with the least relaxation support.
                flippable = sorted(
                    (v for v, c in con.terms if c > 0 and assignment[v] == 1),
                    key=lambda v: (relax_value.get(v, 0.0), v),
                )
                if not flippable:
                    return False
                assignment[flippable[0]] = 0
        if con.sense in (">=", "=="):
            for _ in range(len(con.terms)):
                if row_value(con) >= con.rhs - 1e-9:
                    break
                flippable = sorted(
                    (v for v, c in con.terms if c > 0 and assignment[v] == 0),
                    key=lambda v: (-relax_value.get(v, 0.0), v),
                )
                if not flippable:
                    return False
                assignment[flippable[0]] = 1
        if con.sense == "==" and abs(row_value(con) - con.rhs) > 1e-9:
            return False
        if con.sense == "<=" and row_value(con) > con.rhs + 1e-9:
            return False
        if con.sense == ">=" and row_value(con) < con.rhs - 1e-9:
            return False
    return True


def _heuristic_assignments(
    program: ConicProgram, relaxed: ConicSolution, int_tol: float
) -> list[dict[int, int]]:
    """Candidate integral assignments derived from a relaxation point."""
    binaries = program.binaries
    values = {v.id: float(relaxed.primal[v.id]) for v in binaries}
    rows = _binary_only_rows(program)
    nearest = {vid: int(val >= 0.5) for vid, val in values.items()}
    ceiling = {vid: int(val > int_tol) for vid, val in values.items()}
    # Respect hard fixings implied by variable bounds.
    for v in binaries:
        for cand in (nearest, ceiling):
            cand[v.id] = min(max(cand[v.id], int(math.ceil(v.lower - 1e-12))), int(v.upper))
    out: list[dict[int, int]] = []
    for cand in (nearest, ceiling):
        repaired = dict(cand)
        if _repair(repaired, rows, values) and repaired not in out:
            out.append(repaired)
    return out


def _most_fractional(
    program: ConicProgram, solution: ConicSolution, fixed: Mapping[int, float], int_tol: float
) -> int | None:
    best_id: int | None = None
    best_score = int_tol
    for var in program.binaries:
        if var.id in fixed:
            continue
        val = float(solution.primal[var.id])
        score = abs(val - round(val))
        if score > best_score:  # strict: ties keep the lowest id
            best_id, best_score = var.id, score
    return best_id


def solve_mixed_integer(
    program: ConicProgram,
    tolerances: Tolerances | None = None,
    node_limit: int = 10_000,
    backend: str | None = None,
    serial: bool = True,
) -> BnbReport:
    """Solve a MISOCP by best-first branch-and-bound.

    ``serial`` is accepted for interface parity; node processing follows the
    same deterministic best-first order either way, so results are identical.
    Raises :class:`MixedIntegerInfeasible` when no assignment is feasible.
    """
    tol = tolerances or Tolerances()
    binaries = program.binaries

    root = solve_relaxation(program, tol, backend=backend)
    if root.status == "infeasible":
        raise MixedIntegerInfeasible(
            "root relaxation infeasible", certificate=root.certificate
        )
    if root.status == "unbounded":
        raise MixedIntegerInfeasible("root relaxation unbounded")
    if root.status != "optimal":
        raise RuntimeError(f"root relaxation terminated with {root.status}")

    if not binaries:
        return BnbReport(
            incumbent=root,
            fixed_binaries={},
            nodes_explored=1,
            best_bound=root.objective_value,
            proven=True,
        )

    incumbent: ConicSolution | None = None
    incumbent_assignment: dict[int, int] = {}

    def offer(assignment: dict[int, int]) -> None:
        nonlocal incumbent, incumbent_assignment
        solution = refix_and_dualize(program, assignment, tol, backend=backend)
        if solution.status != "optimal":
            return
        if incumbent is None or solution.objective_value < incumbent.objective_value - 1e-15:
            incumbent = solution
            incumbent_assignment = dict(assignment)

    for candidate in _heuristic_assignments(program, root, tol.int_tol):
        offer(candidate)

    nodes_explored = 1
    seq = 0
    heap: list[tuple[float, int, dict[int, float], ConicSolution | None]] = [
        (root.objective_value, seq, {}, root)
    ]
    proven = True

    while heap:
        bound, _, fixed, cached = heapq.heappop(heap)
        if incumbent is not None and bound >= incumbent.objective_value - tol.abs_gap:
            # Best-first order: every remaining node is at least as bad.
            heap.clear()
            break
        if cached is not None:
            node_sol = cached
        else:
            if nodes_explored >= node_limit:
                proven = False
                heapq.heappush(heap, (bound, seq, fixed, None))
                break
            node_sol = solve_relaxation(program, tol, backend=backend, fixings=fixed)
            nodes_explored += 1
            if node_sol.status == "infeasible":
                continue
            if node_sol.status != "optimal":
                raise RuntimeError(
                    f"node relaxation terminated with {node_sol.status} at {fixed}"
                )
            bound = node_sol.objective_value
            if incumbent is not None and bound >= incumbent.objective_value - tol.abs_gap:
                continue

        branch_var = _most_fractional(program, node_sol, fixed, tol.int_tol)
        if branch_var is None:
            assignment = {
                v.id: int(fixed[v.id]) if v.id in fixed else int(round(node_sol.primal[v.id]))
                for v in binaries
            }
            offer(assignment)
            continue
        for value in (0.0, 1.0):
            seq += 1
            child = dict(fixed)
            child[branch_var] = value
            heapq.heappush(heap, (bound, seq, child, None))

    if incumbent is None:
        raise MixedIntegerInfeasible("no feasible binary assignment found")
    best_bound = incumbent.objective_value
    if not proven and heap:
        best_bound = min(entry[0] for entry in heap)
    return BnbReport(
        incumbent=incumbent,
        fixed_binaries=incumbent_assignment,
        nodes_explored=nodes_explored,
        best_bound=min(best_bound, incumbent.objective_value),
        proven=proven,
    )
