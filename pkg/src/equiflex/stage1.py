"""Day-ahead local energy market: dispatch, nodal prices, equity adjustment.

Clears a mixed-integer second-order-cone dispatch of all DERs on the radial
feeder against an upstream price profile, prices every bus from the duals of
the tagged nodal-balance rows (grid import, losses, congestion, and voltage
limits all shape the price), computes each actor's energy burden (energy cost
share of income), and adjusts bus and actor prices by energy-burden ratios
while keeping every bus revenue-neutral.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .conic import (
    ConicProgram,
    ConicSolution,
    LinExpr,
    MixedIntegerInfeasible,
    Tolerances,
    VariableRef,
    compile_standard_form,
    refix_and_dualize,
    solve_mixed_integer,
    solve_relaxation,
)
from .ders import DerPortfolio, EvUnit, emit_dg, emit_energy_floor, emit_flexload, emit_pv, emit_storage, replay_soc
from .grid import NetworkCase, PowerFlowState, validate_topology
from .netflow import NetworkVars, balance_flow_terms, emit_network, extract_state

logger = logging.getLogger(__name__)

__all__ = [
    "Actor",
    "ActorTable",
    "MarketInputs",
    "MarketInputError",
    "MarketInfeasibleError",
    "DispatchResult",
    "DlmpSchedule",
    "BurdenTable",
    "AdjustedPriceTable",
    "SettlementReport",
    "assemble_stage1",
    "clear_energy_market",
    "compute_energy_burden",
    "adjust_prices_equity",
    "settlement_report",
    "write_dispatch_csv",
    "write_dlmp_csv",
    "write_actor_prices_csv",
]


class MarketInputError(ValueError):
    """Inconsistent market inputs (named entity in the message)."""


class MarketInfeasibleError(RuntimeError):
    """The market program has no feasible dispatch."""

    def __init__(self, message: str, certificate=None, violated_tags: tuple[str, ...] = ()):
        super().__init__(message)
        self.certificate = certificate
        self.violated_tags = violated_tags


# ---------------------------------------------------------------------------
# Inputs
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Actor:
    """A market participant: a household or business behind a bus.

    ``baseline_kw`` is its firm consumption profile; ``share`` its fraction
    of the bus fixed load (used for settlement weighting); ``devices`` the
    ids of DER units it owns.
    """

    id: str
    bus: int
    daily_income_usd: float
    baseline_kw: np.ndarray
    share: float = 1.0
    devices: tuple[str, ...] = ()


@dataclass(frozen=True)
class ActorTable:
    actors: tuple[Actor, ...]

    def __iter__(self):
        return iter(self.actors)

    def ids(self) -> tuple[str, ...]:
        return tuple(a.id for a in self.actors)

    def at_bus(self, bus: int) -> tuple[Actor, ...]:
        return tuple(a for a in self.actors if a.bus == bus)

    def buses(self) -> tuple[int, ...]:
        return tuple(sorted({a.bus for a in self.actors}))

    def validate(self, case: NetworkCase) -> None:
        seen: set[str] = set()
        for a in self.actors:
            if a.id in seen:
                raise MarketInputError(f"duplicate actor id {a.id!r}")
            seen.add(a.id)
            if a.bus not in case.bus_ids:
                raise MarketInputError(f"actor {a.id}: bus {a.bus} not in the network case")
            if not a.daily_income_usd > 0:
                raise MarketInputError(f"actor {a.id}: daily income must be > 0")
            if len(a.baseline_kw) != case.horizon:
                raise MarketInputError(
                    f"actor {a.id}: baseline length {len(a.baseline_kw)} != horizon {case.horizon}"
                )
            if np.any(np.asarray(a.baseline_kw) < 0):
                raise MarketInputError(f"actor {a.id}: baseline consumption must be nonnegative")
            if not (0 < a.share <= 1):
                raise MarketInputError(f"actor {a.id}: share must lie in (0, 1]")
        for bus in self.buses():
            total = sum(a.share for a in self.at_bus(bus))
            if abs(total - 1.0) > 1e-9:
                raise MarketInputError(
                    f"bus {bus}: actor shares sum to {total}, expected 1"
                )


@dataclass(frozen=True, eq=False)
class MarketInputs:
    """Everything the day-ahead clearing needs."""

    ug_price: np.ndarray            # $/kWh upstream profile, length horizon
    network: NetworkCase
    portfolio: DerPortfolio
    actors: ActorTable

    def validate(self) -> None:
        case = self.network
        report = validate_topology(case)
        if not report.ok:
            raise MarketInputError(
                "network case is not a valid radial feeder: " + "; ".join(report.violations)
            )
        price = np.asarray(self.ug_price, dtype=float)
        if price.shape != (case.horizon,):
            raise MarketInputError(
                f"ug_price length {price.shape} != horizon {case.horizon}"
            )
        if np.any(price < 0):
            raise MarketInputError("ug_price must be nonnegative")
        self.actors.validate(case)
        self.portfolio.validate_against(case, self.actors.ids())
        for unit in self.portfolio.pv:
            if len(unit.forecast_kw) != case.horizon:
                raise MarketInputError(
                    f"{unit.id}: forecast length {len(unit.forecast_kw)} != horizon {case.horizon}"
                )
            pf = np.asarray(unit.power_factor_limit, dtype=float)
            if pf.ndim and len(pf) != case.horizon:
                raise MarketInputError(f"{unit.id}: power factor profile length mismatch")
        for unit in self.portfolio.flex:
            if len(unit.p_max_kw) != case.horizon:
                raise MarketInputError(
                    f"{unit.id}: deviation bound length {len(unit.p_max_kw)} != horizon"
                )
        for unit in self.portfolio.ev:
            if unit.departure >= case.horizon:
                raise MarketInputError(
                    f"{unit.id}: departure {unit.departure} outside horizon {case.horizon}"
                )
        device_owner = {u.id: u.owner for u in self.portfolio.all_units()}
        for actor in self.actors:
            for dev in actor.devices:
                if dev not in device_owner:
                    raise MarketInputError(f"actor {actor.id}: unknown device {dev!r}")
                if device_owner[dev] and device_owner[dev] != actor.id:
                    raise MarketInputError(
                        f"actor {actor.id}: device {dev!r} is owned by {device_owner[dev]!r}"
                    )


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DispatchResult:
    """Cleared day-ahead dispatch (all series per-unit, full horizon)."""

    der_values: dict[str, dict[str, np.ndarray]]
    state: PowerFlowState
    pgen: dict[int, np.ndarray]
    pload: dict[int, np.ndarray]
    total_cost: float
    cost_breakdown: dict[str, float]
    solution: ConicSolution

    def der_series(self, der_id: str) -> dict[str, np.ndarray]:
        return self.der_values[der_id]


@dataclass(frozen=True, eq=False)
class DlmpSchedule:
    """Nodal energy prices from the balance-row duals ($/kWh)."""

    lam: dict[tuple[int, int], float]
    horizon: int

    def at(self, bus: int, t: int) -> float:
        return self.lam[(bus, t)]

    def bus_profile(self, bus: int) -> np.ndarray:
        return np.array([self.lam[(bus, t)] for t in range(self.horizon)])

    def buses(self) -> tuple[int, ...]:
        return tuple(sorted({n for (n, _) in self.lam}))


@dataclass(frozen=True, eq=False)
class BurdenTable:
    """Energy-burden profiles: per actor, per bus, and network average."""

    eb_actor: dict[tuple[str, int], float]
    eb_bus: dict[tuple[int, int], float]
    eb_avg: np.ndarray
    weights: dict[tuple[str, int], float]
    actor_bus: dict[str, int]
    consistent_weights: bool = True


@dataclass(frozen=True, eq=False)
class AdjustedPriceTable:
    """Burden-adjusted prices with the revenue-neutral reconciliation."""

    bus_price: dict[tuple[int, int], float]
    actor_price: dict[tuple[str, int], float]
    eb_bus: dict[tuple[int, int], float]
    eb_avg: np.ndarray
    mode: str

    def actor_profile(self, actor_id: str, horizon: int) -> np.ndarray:
        return np.array([self.actor_price[(actor_id, t)] for t in range(horizon)])


@dataclass(frozen=True, eq=False)
class ActorSettlement:
    actor: str
    bus: int
    energy_kwh: float
    payment_dlmp: float
    payment_adjusted: float
    mean_price_dlmp: float
    mean_price_adjusted: float


@dataclass(frozen=True, eq=False)
class SettlementReport:
    rows: tuple[ActorSettlement, ...]
    total_payment_dlmp: float
    total_payment_adjusted: float
    welfare_delta_usd: float
    dispatch_cost_usd: float
    tier_mean_price: dict[str, float] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------


def assemble_stage1(inputs: MarketInputs) -> ConicProgram:
    """Build the full day-ahead market program (unsealed).

    Adds, in order: network physics, every DER's feasible set, per-bus net
    generation/consumption aggregation rows (``netgen:n:t``/``netload:n:t``),
    the per-(bus, t) active balance rows ``balance:n:t`` whose duals price
    energy, the reactive analogue ``qbalance:n:t``, bus energy floors, and
    the total-cost objective in dollars.
    """
    inputs.validate()
    case = inputs.network
    topology = validate_topology(case)
    times = list(case.times)
    base = case.base
    dt = case.dt

    program = ConicProgram()
    net = emit_network(program, case, topology, times)

    pv_vars = [emit_pv(program, u, times, base, dt) for u in inputs.portfolio.pv]
    dg_vars = [emit_dg(program, u, times, base, dt) for u in inputs.portfolio.dg]
    bess_vars = [emit_storage(program, u, times, base, dt, mode="bess")
                 for u in inputs.portfolio.bess]
    ev_vars = [emit_storage(program, u, times, base, dt, mode="ev")
               for u in inputs.portfolio.ev]
    fl_vars = [emit_flexload(program, u, times, base, dt) for u in inputs.portfolio.flex]

    by_bus_pv = _group(pv_vars, lambda v: v.unit.bus)
    by_bus_dg = _group(dg_vars, lambda v: v.unit.bus)
    by_bus_st = _group(bess_vars + ev_vars, lambda v: v.unit.bus)
    by_bus_fl = _group(fl_vars, lambda v: v.unit.bus)

    pcc = set(case.pcc_buses)
    for n in topology.order:
        spec = case.bus(n)
        for t in times:
            pgen = program.add_variable(f"pgen:{n}:{t}", lower=0.0)
            pload = program.add_variable(f"pload:{n}:{t}")
            gen_terms = LinExpr.of(1.0 * pgen)
            for v in by_bus_pv.get(n, ()):
                gen_terms = gen_terms - v.p[t]
            for v in by_bus_dg.get(n, ()):
                gen_terms = gen_terms - v.p[t]
            for v in by_bus_st.get(n, ()):
                gen_terms = gen_terms - v.p_dch[t]
            program.add_linear(gen_terms, "==", 0.0, tag=f"netgen:{n}:{t}")

            load_terms = LinExpr.of(1.0 * pload)
            for v in by_bus_fl.get(n, ()):
                load_terms = load_terms - v.p[t]
            for v in by_bus_st.get(n, ()):
                load_terms = load_terms - v.p_ch[t]
            program.add_linear(load_terms, "==", float(spec.fixed_load[t]),
                               tag=f"netload:{n}:{t}")

            flow_p, flow_q = balance_flow_terms(net, n, t)
            balance = flow_p + pload - pgen
            qbalance = flow_q
            if n in pcc:
                balance = balance - net.p_ug[(n, t)]
                qbalance = qbalance - net.q_ug[(n, t)]
            for v in by_bus_pv.get(n, ()):
                qbalance = qbalance - v.q[t]
            program.add_linear(balance, "==", 0.0, tag=f"balance:{n}:{t}")
            program.add_linear(qbalance, "==", -float(spec.reactive_load[t]),
                               tag=f"qbalance:{n}:{t}")

    for n in topology.order:
        emit_energy_floor(program, case, n, by_bus_fl.get(n, ()), times)

    # Objective: dollars = price($/kWh) x power(p.u.) x base(kW) x dt(h)
    scale = base.power_kw * dt
    obj: dict[int, float] = {}

    def charge(ref: VariableRef, usd_per_kwh: float) -> None:
        if usd_per_kwh:
            obj[ref.id] = obj.get(ref.id, 0.0) + usd_per_kwh * scale

    price = np.asarray(inputs.ug_price, dtype=float)
    for (n, t), ref in net.p_ug.items():
        charge(ref, float(price[t]))
    for v in dg_vars:
        for t in times:
            charge(v.p[t], v.unit.cost_usd_per_kwh)
    for v in fl_vars:
        for t in times:
            charge(v.p_pos[t], v.unit.cost_usd_per_kwh)
            charge(v.p_neg[t], v.unit.cost_usd_per_kwh)
    for v in bess_vars + ev_vars:
        for t in times:
            charge(v.p_ch[t], v.unit.cost_usd_per_kwh)
            charge(v.p_dch[t], v.unit.cost_usd_per_kwh)
    program.set_objective(LinExpr(dict(sorted(obj.items())), 0.0))
    return program


def _group(items, key):
    out: dict = {}
    for item in items:
        out.setdefault(key(item), []).append(item)
    return out


def _vars_by_name(program: ConicProgram) -> dict[str, VariableRef]:
    return {v.name: v for v in program.variables}


def infeasibility_tags(
    program: ConicProgram, certificate, threshold: float = 1e-9, top: int = 12
) -> tuple[str, ...]:
    """Constraint tags carrying the largest infeasibility-certificate weight."""
    if certificate is None:
        return ()
    form = compile_standard_form(program, None)
    scored = []
    for con, (std_row, _sign) in zip(program.constraints, form.constraint_rows):
        weight = abs(float(certificate[std_row]))
        if weight > threshold:
            scored.append((weight, con.tag))
    scored.sort(reverse=True)
    return tuple(tag for _w, tag in scored[:top])


# ---------------------------------------------------------------------------
# Clearing
# ---------------------------------------------------------------------------


def clear_energy_market(
    inputs: MarketInputs,
    tolerances: Tolerances | None = None,
    backend: str | None = None,
    relax_binaries: bool = False,
    node_limit: int = 10_000,
) -> tuple[DispatchResult, DlmpSchedule]:
    """Solve the day-ahead market and price every bus.

    The mixed-integer dispatch is solved first; duals are then taken from the
    continuous program with the incumbent's binaries fixed.  The published
    price is the load sensitivity: raising the fixed load at (n, t) by eps
    raises the optimal cost by lambda * eps.
    """
    tol = tolerances or Tolerances()
    program = assemble_stage1(inputs)
    sealed = program.seal()

    if relax_binaries:
        solution = solve_relaxation(sealed, tol, backend)
        if solution.status != "optimal":
            _raise_market_failure(sealed, solution)
    else:
        try:
            report = solve_mixed_integer(sealed, tol, node_limit=node_limit, backend=backend)
        except MixedIntegerInfeasible as exc:
            tags = infeasibility_tags(sealed, exc.certificate)
            raise MarketInfeasibleError(
                "day-ahead market is infeasible; leading constraint tags: "
                + (", ".join(tags) if tags else "(no certificate)"),
                certificate=exc.certificate,
                violated_tags=tags,
            ) from exc
        solution = refix_and_dualize(sealed, report.fixed_binaries, tol, backend)
        if solution.status != "optimal":
            _raise_market_failure(sealed, solution)

    dispatch = _extract_dispatch(inputs, sealed, solution, snap_binaries=not relax_binaries)
    dlmp = _extract_dlmp(inputs, solution)
    return dispatch, dlmp


def _raise_market_failure(program: ConicProgram, solution: ConicSolution) -> None:
    if solution.status == "infeasible":
        tags = infeasibility_tags(program, solution.certificate)
        raise MarketInfeasibleError(
            "day-ahead market is infeasible; leading constraint tags: "
            + (", ".join(tags) if tags else "(no certificate)"),
            certificate=solution.certificate,
            violated_tags=tags,
        )
    raise MarketInfeasibleError(f"day-ahead solve ended with status {solution.status!r}")


def _extract_dispatch(
    inputs: MarketInputs,
    program: ConicProgram,
    solution: ConicSolution,
    snap_binaries: bool = True,
) -> DispatchResult:
    case = inputs.network
    names = _vars_by_name(program)
    horizon = case.horizon
    times = list(case.times)

    def series(prefix: str, uid: str) -> np.ndarray:
        return np.array([solution.primal[names[f"{prefix}:{uid}:{t}"].id] for t in times])

    der_values: dict[str, dict[str, np.ndarray]] = {}
    for u in inputs.portfolio.pv:
        der_values[u.id] = {"p": series("ppv", u.id), "q": series("qpv", u.id)}
    for u in inputs.portfolio.dg:
        der_values[u.id] = {"p": series("pdg", u.id)}
    for u, mode in [(b, "bess") for b in inputs.portfolio.bess] + [
        (e, "ev") for e in inputs.portfolio.ev
    ]:
        window = list(u.window(horizon)) if mode == "ev" else times
        x_ch = series("xch", u.id)
        x_dch = series("xdch", u.id)
        p_ch = np.clip(series("pch", u.id), 0.0, None)
        p_dch = np.clip(series("pdch", u.id), 0.0, None)
        if snap_binaries:
            # fixed 0/1 indicators come back within solver tolerance of
            # integral; snapping them (and the powers they gate) makes the
            # exclusivity and window invariants hold exactly
            x_ch = np.round(x_ch) + 0.0
            x_dch = np.round(x_dch) + 0.0
            p_ch = p_ch * x_ch
            p_dch = p_dch * x_dch
        soc = np.zeros(horizon)
        soc[window] = replay_soc(u, p_ch, p_dch, case.base, case.dt, window)
        der_values[u.id] = {
            "p_ch": p_ch, "p_dch": p_dch, "x_ch": x_ch, "x_dch": x_dch, "soc": soc,
        }
    for u in inputs.portfolio.flex:
        der_values[u.id] = {
            "p_fl": series("pfl", u.id),
            "p_pos": series("pflpos", u.id),
            "p_neg": series("pflneg", u.id),
        }

    pgen = {n: np.array([solution.primal[names[f"pgen:{n}:{t}"].id] for t in times])
            for n in case.bus_ids}
    pload = {n: np.array([solution.primal[names[f"pload:{n}:{t}"].id] for t in times])
             for n in case.bus_ids}

    topology = validate_topology(case)
    state = _state_from_solution(case, topology, solution, names)

    scale = case.base.power_kw * case.dt
    price = np.asarray(inputs.ug_price, dtype=float)
    ug_cost = float(sum(price[t] * state.p_ug_total()[t] for t in times)) * scale
    dg_cost = float(sum(
        u.cost_usd_per_kwh * der_values[u.id]["p"].sum() for u in inputs.portfolio.dg
    )) * scale
    fl_cost = float(sum(
        u.cost_usd_per_kwh * (der_values[u.id]["p_pos"].sum() + der_values[u.id]["p_neg"].sum())
        for u in inputs.portfolio.flex
    )) * scale
    st_cost = float(sum(
        u.cost_usd_per_kwh * (der_values[u.id]["p_ch"].sum() + der_values[u.id]["p_dch"].sum())
        for u in (*inputs.portfolio.bess, *inputs.portfolio.ev)
    )) * scale
    breakdown = {"ug": ug_cost, "dg": dg_cost, "flex": fl_cost, "storage": st_cost}

    return DispatchResult(
        der_values=der_values,
        state=state,
        pgen=pgen,
        pload=pload,
        total_cost=float(solution.objective_value),
        cost_breakdown=breakdown,
        solution=solution,
    )


def _state_from_solution(case, topology, solution, names) -> PowerFlowState:
    times = list(case.times)

    def arr(fmt: str, *key) -> np.ndarray:
        return np.array(
            [solution.primal[names[fmt.format(*key, t=t)].id] for t in times]
        )

    v_sq = {n: arr("vsq:{}:{t}", n) for n in topology.order}
    i_sq = {}
    p_flow = {}
    q_flow = {}
    for line in topology.oriented_lines:
        key = (line.parent, line.child)
        i_sq[key] = arr("isq:{}:{}:{t}", *key)
        p_flow[key] = arr("pflow:{}:{}:{t}", *key)
        q_flow[key] = arr("qflow:{}:{}:{t}", *key)
    p_ug = {n: arr("pug:{}:{t}", n) for n in sorted(case.pcc_buses)}
    q_ug = {n: arr("qug:{}:{t}", n) for n in sorted(case.pcc_buses)}
    return PowerFlowState(v_sq=v_sq, i_sq=i_sq, p_flow=p_flow, q_flow=q_flow,
                          p_ug=p_ug, q_ug=q_ug)


def _extract_dlmp(inputs: MarketInputs, solution: ConicSolution) -> DlmpSchedule:
    case = inputs.network
    scale = case.base.power_kw * case.dt
    lam: dict[tuple[int, int], float] = {}
    for n in case.bus_ids:
        for t in case.times:
            # balance-row dual is d(cost)/d(rhs); +rhs acts as free injection,
            # so the marginal cost of additional load is its negation
            lam[(n, t)] = -solution.dual(f"balance:{n}:{t}") / scale
    return DlmpSchedule(lam=lam, horizon=case.horizon)


def validate_dispatch(
    inputs: MarketInputs, dispatch: DispatchResult, tol: float = 1e-6
) -> float:
    """Replay the nodal balance from the returned series; max residual (p.u.)."""
    case = inputs.network
    topology = validate_topology(case)
    children = topology.children()
    worst = 0.0
    for n in topology.order:
        spec = case.bus(n)
        gen = np.zeros(case.horizon)
        load = spec.fixed_load.astype(float).copy()
        port = inputs.portfolio.by_bus(n)
        for u in port.pv:
            gen += dispatch.der_values[u.id]["p"]
        for u in port.dg:
            gen += dispatch.der_values[u.id]["p"]
        for u in (*port.bess, *port.ev):
            gen += dispatch.der_values[u.id]["p_dch"]
            load += dispatch.der_values[u.id]["p_ch"]
        for u in port.flex:
            load += dispatch.der_values[u.id]["p_fl"]
        inflow = np.zeros(case.horizon)
        parent = topology.parent.get(n)
        if parent is not None:
            line = case.lines[_line_index_of(topology, parent, n)]
            inflow = (dispatch.state.p_flow[(parent, n)]
                      - line.r * dispatch.state.i_sq[(parent, n)])
        outflow = np.zeros(case.horizon)
        for c in children[n]:
            outflow += dispatch.state.p_flow[(n, c)]
        imported = dispatch.state.p_ug.get(n, np.zeros(case.horizon))
        residual = np.abs(outflow - inflow + load - gen - imported)
        worst = max(worst, float(residual.max()))
    return worst


def _line_index_of(topology, parent, child) -> int:
    for line in topology.oriented_lines:
        if line.parent == parent and line.child == child:
            return line.index
    raise KeyError(f"no oriented line {parent}->{child}")


# ---------------------------------------------------------------------------
# Energy burden and price adjustment
# ---------------------------------------------------------------------------


def compute_energy_burden(
    actors: ActorTable,
    prices,
    dt: float = 1.0,
    average: str = "load",
) -> BurdenTable:
    """Energy burden per actor, per bus, and the network average per t.

    ``prices`` may be an upstream profile (array, $/kWh, applied to every
    bus), a :class:`DlmpSchedule`, or a ``{(bus, t): price}`` mapping.  An
    actor's burden at t is its energy cost for that interval divided by its
    per-interval income share: ``price * baseline * dt / (income / T)``.
    """
    actor_list = list(actors)
    if not actor_list:
        raise MarketInputError("actor table is empty")
    horizon = len(actor_list[0].baseline_kw)

    def price_at(bus: int, t: int) -> float:
        if isinstance(prices, DlmpSchedule):
            return prices.at(bus, t)
        if isinstance(prices, Mapping):
            return float(prices[(bus, t)])
        return float(np.asarray(prices, dtype=float)[t])

    eb_actor: dict[tuple[str, int], float] = {}
    weights: dict[tuple[str, int], float] = {}
    actor_bus: dict[str, int] = {}
    for a in actor_list:
        if not a.daily_income_usd > 0:
            raise MarketInputError(f"actor {a.id}: income must be > 0")
        income_per_interval = a.daily_income_usd / horizon
        actor_bus[a.id] = a.bus
        for t in range(horizon):
            cost = price_at(a.bus, t) * float(a.baseline_kw[t]) * dt
            eb = cost / income_per_interval
            if eb < 0:
                raise MarketInputError(
                    f"actor {a.id}: negative energy burden at t={t} (negative price)"
                )
            if eb >= 1:
                raise MarketInputError(
                    f"actor {a.id}: energy burden {eb:.3f} at t={t} is not below 1; "
                    "income and consumption data are inconsistent"
                )
            eb_actor[(a.id, t)] = eb
            weights[(a.id, t)] = float(a.baseline_kw[t]) * dt

    eb_bus: dict[tuple[int, int], float] = {}
    for bus in actors.buses():
        members = actors.at_bus(bus)
        for t in range(horizon):
            w = np.array([weights[(a.id, t)] for a in members])
            e = np.array([eb_actor[(a.id, t)] for a in members])
            if average == "simple" or w.sum() <= 0:
                eb_bus[(bus, t)] = float(e.mean())
            else:
                eb_bus[(bus, t)] = float((w * e).sum() / w.sum())

    eb_avg = np.zeros(horizon)
    for t in range(horizon):
        w = np.array([weights[(a.id, t)] for a in actor_list])
        e = np.array([eb_actor[(a.id, t)] for a in actor_list])
        if average == "simple" or w.sum() <= 0:
            eb_avg[t] = float(e.mean())
        else:
            eb_avg[t] = float((w * e).sum() / w.sum())

    return BurdenTable(eb_actor=eb_actor, eb_bus=eb_bus, eb_avg=eb_avg,
                       weights=weights, actor_bus=actor_bus)


def adjust_prices_equity(
    dlmp: DlmpSchedule,
    burdens: BurdenTable,
    mode: str = "progressive",
    neutrality_tol: float = 1e-8,
) -> AdjustedPriceTable:
    """Scale nodal prices by energy-burden ratios, revenue-neutral per bus.

    ``progressive`` (default): a bus or actor whose burden exceeds the
    average pays proportionally *less* (price scales by average/burden), so
    low-income participants see lower prices.  ``literal`` applies the ratios
    the other way round (burden/average).  Within each bus, actor prices are
    reconciled so total actor payments equal the bus price times total load
    exactly; a residual beyond ``neutrality_tol`` with consistent weights is
    an internal error.
    """
    if mode not in ("progressive", "literal"):
        raise MarketInputError(f"mode must be 'progressive' or 'literal', got {mode!r}")
    horizon = dlmp.horizon
    bus_price: dict[tuple[int, int], float] = {}
    actor_price: dict[tuple[str, int], float] = {}

    actors_by_bus: dict[int, list[str]] = {}
    for actor_id, bus in burdens.actor_bus.items():
        actors_by_bus.setdefault(bus, []).append(actor_id)
    for members in actors_by_bus.values():
        members.sort()

    for bus in dlmp.buses():
        members = actors_by_bus.get(bus, [])
        for t in range(horizon):
            lam = dlmp.at(bus, t)
            if not members:
                bus_price[(bus, t)] = lam
                continue
            eb_n = burdens.eb_bus[(bus, t)]
            eb_bar = float(burdens.eb_avg[t])
            if eb_n <= 0 or eb_bar <= 0:
                raise MarketInputError(
                    f"bus {bus}, t={t}: nonpositive energy burden "
                    f"(bus {eb_n}, average {eb_bar})"
                )
            ratio = (eb_bar / eb_n) if mode == "progressive" else (eb_n / eb_bar)
            lam_new = lam * ratio
            bus_price[(bus, t)] = lam_new

            w = np.array([burdens.weights[(a, t)] for a in members])
            e = np.array([burdens.eb_actor[(a, t)] for a in members])
            if np.any(e <= 0):
                zero_at = members[int(np.argmin(e))]
                raise MarketInputError(
                    f"actor {zero_at}: nonpositive energy burden at t={t}"
                )
            if mode == "progressive":
                raw = lam_new / e
            else:
                raw = lam_new * e
            # Per-bus reconciliation: actor payments must equal the bus
            # price on the same load, whatever burden table was supplied.
            total = float(w.sum())
            paid = float((raw * w).sum())
            if total > 0 and paid > 0:
                factor = lam_new * total / paid
            else:
                factor = 1.0
            adjusted = raw * factor
            residual = abs(float((adjusted * w).sum()) - lam_new * total)
            if residual > neutrality_tol * max(1.0, abs(lam_new * total)):
                raise AssertionError(
                    f"revenue neutrality failed at bus {bus}, t={t}: residual {residual}"
                )
            for a, price in zip(members, adjusted):
                actor_price[(a, t)] = float(price)

    return AdjustedPriceTable(
        bus_price=bus_price,
        actor_price=actor_price,
        eb_bus=dict(burdens.eb_bus),
        eb_avg=burdens.eb_avg.copy(),
        mode=mode,
    )


def settlement_report(
    dispatch: DispatchResult,
    actors: ActorTable,
    dlmp: DlmpSchedule,
    adjusted: AdjustedPriceTable,
    dt: float = 1.0,
    tiers: Mapping[str, str] | None = None,
) -> SettlementReport:
    """Per-actor payments under nodal vs adjusted prices, plus aggregates.

    The welfare delta is the change in total consumer payments at fixed
    dispatch (price adjustment redistributes payments; it does not re-dispatch).
    """
    rows = []
    horizon = dlmp.horizon
    for a in actors:
        base = np.asarray(a.baseline_kw, dtype=float)
        energy = float(base.sum()) * dt
        pay_dlmp = float(sum(dlmp.at(a.bus, t) * base[t] * dt for t in range(horizon)))
        pay_adj = float(sum(
            adjusted.actor_price[(a.id, t)] * base[t] * dt for t in range(horizon)
        ))
        rows.append(ActorSettlement(
            actor=a.id,
            bus=a.bus,
            energy_kwh=energy,
            payment_dlmp=pay_dlmp,
            payment_adjusted=pay_adj,
            mean_price_dlmp=pay_dlmp / energy if energy > 0 else 0.0,
            mean_price_adjusted=pay_adj / energy if energy > 0 else 0.0,
        ))
    total_dlmp = float(sum(r.payment_dlmp for r in rows))
    total_adj = float(sum(r.payment_adjusted for r in rows))

    tier_mean: dict[str, float] = {}
    if tiers:
        groups: dict[str, list[ActorSettlement]] = {}
        for r in rows:
            groups.setdefault(tiers.get(r.actor, "unknown"), []).append(r)
        for tier, group in sorted(groups.items()):
            energy = sum(r.energy_kwh for r in group)
            paid = sum(r.payment_adjusted for r in group)
            tier_mean[tier] = paid / energy if energy > 0 else 0.0

    return SettlementReport(
        rows=tuple(rows),
        total_payment_dlmp=total_dlmp,
        total_payment_adjusted=total_adj,
        welfare_delta_usd=total_adj - total_dlmp,
        dispatch_cost_usd=dispatch.total_cost,
        tier_mean_price=tier_mean,
    )


# ---------------------------------------------------------------------------
# CSV artifacts
# ---------------------------------------------------------------------------


def write_dispatch_csv(dispatch: DispatchResult, path) -> None:
    """Columns: unit, t, variable, value (per-unit series plus grid import)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit", "t", "variable", "value"])
        for uid in sorted(dispatch.der_values):
            for variable in sorted(dispatch.der_values[uid]):
                values = dispatch.der_values[uid][variable]
                for t, value in enumerate(values):
                    writer.writerow([uid, t, variable, repr(float(value))])
        for bus in sorted(dispatch.state.p_ug):
            for t, value in enumerate(dispatch.state.p_ug[bus]):
                writer.writerow([f"pcc:{bus}", t, "p_ug", repr(float(value))])


def write_dlmp_csv(dlmp: DlmpSchedule, adjusted: AdjustedPriceTable | None, path) -> None:
    """Columns: bus, t, lambda_e, lambda_e_new ($/kWh)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bus", "t", "lambda_e", "lambda_e_new"])
        for bus in dlmp.buses():
            for t in range(dlmp.horizon):
                lam = dlmp.at(bus, t)
                lam_new = adjusted.bus_price[(bus, t)] if adjusted else lam
                writer.writerow([bus, t, repr(lam), repr(lam_new)])


def write_actor_prices_csv(
    adjusted: AdjustedPriceTable, actors: ActorTable, path, dt: float = 1.0
) -> None:
    """Columns: actor, t, lambda_a_new, payment ($)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["actor", "t", "lambda_a_new", "payment"])
        for a in sorted(actors, key=lambda a: a.id):
            for t in range(len(a.baseline_kw)):
                price = adjusted.actor_price[(a.id, t)]
                payment = price * float(a.baseline_kw[t]) * dt
                writer.writerow([a.id, t, repr(price), repr(payment)])
