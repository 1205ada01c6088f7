"""Branch-flow network constraint emission shared by both market stages.

Emits the radial distribution load-flow in its second-order-cone relaxation:
per oriented line, the voltage-drop equality, the relaxed flow cone
``P^2 + Q^2 <= v_parent * l`` (``l`` is the squared current magnitude), and
the hard apparent-capacity cone; per bus, squared-voltage box bounds with the
substation pinned at the reference.  Nodal balance rows are written by the
caller, which owns the injection expressions; :func:`balance_flow_terms`
provides the flow side of those rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conic import ConicProgram, ConicSolution, LinExpr, VariableRef
from .grid import NetworkCase, PowerFlowState, TopologyReport

__all__ = [
    "NetworkVars",
    "emit_network",
    "balance_flow_terms",
    "extract_state",
]


@dataclass(frozen=True)
class NetworkVars:
    """Program references for the network state, keyed like PowerFlowState."""

    case: NetworkCase
    topology: TopologyReport
    times: tuple[int, ...]
    v_sq: dict[tuple[int, int], VariableRef]              # (bus, t)
    i_sq: dict[tuple[int, int, int], VariableRef]         # (parent, child, t)
    p_flow: dict[tuple[int, int, int], VariableRef]
    q_flow: dict[tuple[int, int, int], VariableRef]
    p_ug: dict[tuple[int, int], VariableRef]              # (pcc bus, t)
    q_ug: dict[tuple[int, int], VariableRef]


def emit_network(
    program: ConicProgram,
    case: NetworkCase,
    topology: TopologyReport,
    times,
) -> NetworkVars:
    """Emit voltage/flow variables and the line physics for every interval.

    The flow cone is marked as a relaxation so its tightness can be audited
    after solving; the capacity cone and voltage box are hard limits.
    """
    if not topology.ok:
        raise ValueError(
            "network emission requires a validated radial feeder; violations: "
            + "; ".join(topology.violations)
        )
    times = tuple(int(t) for t in times)
    v_sq: dict[tuple[int, int], VariableRef] = {}
    i_sq: dict[tuple[int, int, int], VariableRef] = {}
    p_flow: dict[tuple[int, int, int], VariableRef] = {}
    q_flow: dict[tuple[int, int, int], VariableRef] = {}
    p_ug: dict[tuple[int, int], VariableRef] = {}
    q_ug: dict[tuple[int, int], VariableRef] = {}

    pcc = set(case.pcc_buses)
    for n in topology.order:
        spec = case.bus(n)
        lo, hi = spec.v_min**2, spec.v_max**2
        if n in pcc:
            lo = hi = case.v_ref**2
        for t in times:
            v_sq[(n, t)] = program.add_variable(f"vsq:{n}:{t}", lower=lo, upper=hi)
    for n in sorted(pcc):
        for t in times:
            p_ug[(n, t)] = program.add_variable(f"pug:{n}:{t}")
            q_ug[(n, t)] = program.add_variable(f"qug:{n}:{t}")

    for line in topology.oriented_lines:
        spec = case.lines[line.index]
        i, j = line.parent, line.child
        v_floor = case.bus(i).v_min ** 2
        # Squared current can never exceed the thermal flow over the lowest
        # admissible voltage; the explicit ceiling tightens the relaxation.
        i_cap = (spec.s_max / max(v_floor, 1e-12)) * spec.s_max / max(v_floor, 1e-12)
        for t in times:
            ell = program.add_variable(f"isq:{i}:{j}:{t}", lower=0.0, upper=i_cap)
            pf = program.add_variable(f"pflow:{i}:{j}:{t}", lower=-spec.s_max, upper=spec.s_max)
            qf = program.add_variable(f"qflow:{i}:{j}:{t}", lower=-spec.s_max, upper=spec.s_max)
            i_sq[(i, j, t)] = ell
            p_flow[(i, j, t)] = pf
            q_flow[(i, j, t)] = qf
            program.add_linear(
                v_sq[(j, t)] - v_sq[(i, t)]
                + 2.0 * (spec.r * pf + spec.x * qf)
                - (spec.r**2 + spec.x**2) * ell,
                "==",
                0.0,
                tag=f"vdrop:{i}:{j}:{t}",
            )
            program.add_rsoc(
                0.5 * v_sq[(i, t)], ell, [1.0 * pf, 1.0 * qf],
                tag=f"flowcone:{i}:{j}:{t}", relaxation=True,
            )
            program.add_soc(
                [spec.s_max, 1.0 * pf, 1.0 * qf], tag=f"linecap:{i}:{j}:{t}"
            )
    return NetworkVars(
        case=case, topology=topology, times=times, v_sq=v_sq, i_sq=i_sq,
        p_flow=p_flow, q_flow=q_flow, p_ug=p_ug, q_ug=q_ug,
    )


def balance_flow_terms(net: NetworkVars, n: int, t: int) -> tuple[LinExpr, LinExpr]:
    """Flow side of the nodal balance at (n, t): outgoing minus arriving.

    Returns (active, reactive) expressions equal to
    ``sum(flows leaving n) - (flow arriving from the parent net of losses)``
    so the balance row reads  flows + load - generation - import == 0.
    """
    children = net.topology.children()[n]
    parent = net.topology.parent.get(n)
    active = LinExpr.of(0.0)
    reactive = LinExpr.of(0.0)
    for c in children:
        active = active + net.p_flow[(n, c, t)]
        reactive = reactive + net.q_flow[(n, c, t)]
    if parent is not None:
        spec = net.case.lines[_line_index(net.topology, parent, n)]
        active = active - (net.p_flow[(parent, n, t)] - spec.r * net.i_sq[(parent, n, t)])
        reactive = reactive - (net.q_flow[(parent, n, t)] - spec.x * net.i_sq[(parent, n, t)])
    return active, reactive


def _line_index(topology: TopologyReport, parent: int, child: int) -> int:
    for line in topology.oriented_lines:
        if line.parent == parent and line.child == child:
            return line.index
    raise KeyError(f"no oriented line {parent}->{child}")


def extract_state(net: NetworkVars, solution: ConicSolution) -> PowerFlowState:
    """Read the solved network state back into arrays (p.u.)."""
    horizon = net.case.horizon
    times = net.times

    def series(refs, key):
        out = np.zeros(horizon)
        for t in times:
            out[t] = solution.primal[refs[(*key, t)].id]
        return out

    v_sq = {n: series(net.v_sq, (n,)) for n in net.topology.order}
    i_sq = {}
    p_flow = {}
    q_flow = {}
    for line in net.topology.oriented_lines:
        key = (line.parent, line.child)
        i_sq[key] = series(net.i_sq, key)
        p_flow[key] = series(net.p_flow, key)
        q_flow[key] = series(net.q_flow, key)
    p_ug = {n: series(net.p_ug, (n,)) for n in sorted(net.case.pcc_buses)}
    q_ug = {n: series(net.q_ug, (n,)) for n in sorted(net.case.pcc_buses)}
    return PowerFlowState(
        v_sq=v_sq, i_sq=i_sq, p_flow=p_flow, q_flow=q_flow, p_ug=p_ug, q_ug=q_ug
    )
