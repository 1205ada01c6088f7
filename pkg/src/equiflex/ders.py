"""DER parameter records and feasible-set constraint emission.

Each unit kind (PV, conventional DG, BESS, EV, flexible load) carries its
published-style parameters in SI units (kW, kWh, $/kWh) and knows how to emit
its day-ahead operating constraints — and, given a day-ahead dispatch, its
real-time flexibility envelope — into a :class:`~equiflex.conic.ConicProgram`.
Emission converts to per-unit on the network base; costs stay in $ and are
assembled by the market stages.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .conic import BINARY, ConicProgram, VariableRef
from .grid import NetworkCase, PerUnitBase

logger = logging.getLogger(__name__)


class DerParameterError(ValueError):
    """A unit record violates its own invariants (names the unit)."""


class InfeasibleWindowError(ValueError):
    """An EV cannot reach its trip energy within its plug-in window."""


def _positive(name: str, unit_id: str, value: float) -> None:
    if not value > 0:
        raise DerParameterError(f"{unit_id}: {name} must be > 0, got {value}")


def _nonnegative(name: str, unit_id: str, value: float) -> None:
    if value < 0:
        raise DerParameterError(f"{unit_id}: {name} must be >= 0, got {value}")


# ---------------------------------------------------------------------------
# Unit records (SI units)
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PvUnit:
    """Rooftop PV with an inverter capacity and a forecast profile.

    ``forecast_kw`` bounds active output per interval; ``power_factor_limit``
    (scalar or per-interval) additionally caps active output at
    ``pf * capacity_kva``; the inverter cone bounds apparent power.
    """

    id: str
    bus: int
    capacity_kva: float
    forecast_kw: np.ndarray
    power_factor_limit: np.ndarray | float = 1.0
    owner: str = ""

    def __post_init__(self) -> None:
        _positive("capacity_kva", self.id, self.capacity_kva)
        if np.any(np.asarray(self.forecast_kw) < 0):
            raise DerParameterError(f"{self.id}: forecast_kw must be nonnegative")
        pf = np.asarray(self.power_factor_limit, dtype=float)
        if np.any(pf <= 0) or np.any(pf > 1):
            raise DerParameterError(f"{self.id}: power_factor_limit outside (0, 1]")

    def pf_at(self, t: int) -> float:
        pf = np.asarray(self.power_factor_limit, dtype=float)
        return float(pf) if pf.ndim == 0 else float(pf[t])


@dataclass(frozen=True)
class DgUnit:
    """Dispatchable conventional generator with box and ramp limits."""

    id: str
    bus: int
    p_min_kw: float
    p_max_kw: float
    ramp_up_kw_per_h: float
    ramp_down_kw_per_h: float
    cost_usd_per_kwh: float
    owner: str = ""
    initial_output_kw: float | None = None  # ramping reference before the first interval

    def __post_init__(self) -> None:
        if not (0 <= self.p_min_kw <= self.p_max_kw):
            raise DerParameterError(
                f"{self.id}: requires 0 <= p_min <= p_max, got [{self.p_min_kw}, {self.p_max_kw}]"
            )
        _positive("ramp_up_kw_per_h", self.id, self.ramp_up_kw_per_h)
        _positive("ramp_down_kw_per_h", self.id, self.ramp_down_kw_per_h)
        _nonnegative("cost_usd_per_kwh", self.id, self.cost_usd_per_kwh)


@dataclass(frozen=True)
class StorageUnit:
    """Stationary battery (BESS): available every interval of the horizon."""

    id: str
    bus: int
    p_ch_max_kw: float
    p_dch_max_kw: float
    eff_ch: float
    eff_dch: float
    energy_init_kwh: float
    capacity_kwh: float
    soc_min_kwh: float
    soc_max_kwh: float
    cost_usd_per_kwh: float
    owner: str = ""

    def __post_init__(self) -> None:
        _positive("p_ch_max_kw", self.id, self.p_ch_max_kw)
        _positive("p_dch_max_kw", self.id, self.p_dch_max_kw)
        for name in ("eff_ch", "eff_dch"):
            eff = getattr(self, name)
            if not (0 < eff <= 1):
                raise DerParameterError(f"{self.id}: {name} must lie in (0, 1], got {eff}")
        if not (self.soc_min_kwh <= self.energy_init_kwh <= self.soc_max_kwh <= self.capacity_kwh):
            raise DerParameterError(
                f"{self.id}: requires soc_min <= energy_init <= soc_max <= capacity, got "
                f"{self.soc_min_kwh} / {self.energy_init_kwh} / {self.soc_max_kwh} / "
                f"{self.capacity_kwh}"
            )
        _nonnegative("cost_usd_per_kwh", self.id, self.cost_usd_per_kwh)


@dataclass(frozen=True)
class EvUnit:
    """Plug-in EV battery, available only within [arrival, departure]."""

    id: str
    bus: int
    p_ch_max_kw: float
    p_dch_max_kw: float
    eff_ch: float
    eff_dch: float
    capacity_kwh: float
    soc_min_kwh: float
    soc_max_kwh: float
    soc_init_kwh: float
    trip_energy_kwh: float
    arrival: int
    departure: int
    cost_usd_per_kwh: float
    owner: str = ""

    def __post_init__(self) -> None:
        _positive("p_ch_max_kw", self.id, self.p_ch_max_kw)
        _positive("p_dch_max_kw", self.id, self.p_dch_max_kw)
        for name in ("eff_ch", "eff_dch"):
            eff = getattr(self, name)
            if not (0 < eff <= 1):
                raise DerParameterError(f"{self.id}: {name} must lie in (0, 1], got {eff}")
        if not (self.soc_min_kwh <= self.soc_init_kwh <= self.soc_max_kwh <= self.capacity_kwh):
            raise DerParameterError(
                f"{self.id}: requires soc_min <= soc_init <= soc_max <= capacity"
            )
        if self.arrival >= self.departure:
            raise DerParameterError(
                f"{self.id}: arrival {self.arrival} must precede departure {self.departure}"
            )
        if self.trip_energy_kwh > self.soc_max_kwh:
            raise InfeasibleWindowError(
                f"{self.id}: trip energy {self.trip_energy_kwh} kWh exceeds the reachable "
                f"state of charge (soc_max {self.soc_max_kwh} kWh)"
            )
        _nonnegative("cost_usd_per_kwh", self.id, self.cost_usd_per_kwh)

    def window(self, horizon: int) -> range:
        """Plug-in intervals [arrival, departure], clipped to the horizon."""
        return range(max(self.arrival, 0), min(self.departure, horizon - 1) + 1)


@dataclass(frozen=True, eq=False)
class FlexLoad:
    """Shiftable/interruptible demand: a signed deviation around the fixed load."""

    id: str
    bus: int
    p_max_kw: np.ndarray
    cost_usd_per_kwh: float
    owner: str = ""

    def __post_init__(self) -> None:
        if np.any(np.asarray(self.p_max_kw) < 0):
            raise DerParameterError(f"{self.id}: p_max_kw must be nonnegative")
        _nonnegative("cost_usd_per_kwh", self.id, self.cost_usd_per_kwh)


@dataclass(frozen=True)
class DerPortfolio:
    """All DER units of a scenario, grouped by kind."""

    pv: tuple[PvUnit, ...] = ()
    dg: tuple[DgUnit, ...] = ()
    bess: tuple[StorageUnit, ...] = ()
    ev: tuple[EvUnit, ...] = ()
    flex: tuple[FlexLoad, ...] = ()

    def all_units(self):
        return (*self.pv, *self.dg, *self.bess, *self.ev, *self.flex)

    def unit_ids(self) -> tuple[str, ...]:
        return tuple(u.id for u in self.all_units())

    def by_bus(self, bus: int):
        return DerPortfolio(
            pv=tuple(u for u in self.pv if u.bus == bus),
            dg=tuple(u for u in self.dg if u.bus == bus),
            bess=tuple(u for u in self.bess if u.bus == bus),
            ev=tuple(u for u in self.ev if u.bus == bus),
            flex=tuple(u for u in self.flex if u.bus == bus),
        )

    def validate_against(self, case: NetworkCase, actor_ids: Iterable[str] | None = None) -> None:
        """Check bus references (and owner references when actors are given)."""
        ids = set(case.bus_ids)
        actor_set = set(actor_ids) if actor_ids is not None else None
        seen: set[str] = set()
        for unit in self.all_units():
            if unit.id in seen:
                raise DerParameterError(f"duplicate DER id {unit.id!r}")
            seen.add(unit.id)
            if unit.bus not in ids:
                raise DerParameterError(f"{unit.id}: bus {unit.bus} not in the network case")
            if actor_set is not None and unit.owner and unit.owner not in actor_set:
                raise DerParameterError(f"{unit.id}: owner {unit.owner!r} not in the actor table")


# ---------------------------------------------------------------------------
# Day-ahead emission
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PvVars:
    unit: PvUnit
    p: dict[int, VariableRef]
    q: dict[int, VariableRef]


@dataclass(frozen=True)
class DgVars:
    unit: DgUnit
    p: dict[int, VariableRef]


@dataclass(frozen=True)
class StorageVars:
    unit: StorageUnit | EvUnit
    mode: str  # "bess" | "ev"
    x_ch: dict[int, VariableRef]
    x_dch: dict[int, VariableRef]
    p_ch: dict[int, VariableRef]
    p_dch: dict[int, VariableRef]
    soc: dict[int, VariableRef]
    window: tuple[int, ...]


@dataclass(frozen=True)
class FlexLoadVars:
    unit: FlexLoad
    p: dict[int, VariableRef]       # signed deviation
    p_pos: dict[int, VariableRef]   # nonnegative split: p = p_pos - p_neg
    p_neg: dict[int, VariableRef]


def emit_pv(
    program: ConicProgram, unit: PvUnit, times: Sequence[int], base: PerUnitBase, dt: float
) -> PvVars:
    """Active output capped by forecast and power-factor share of the inverter;
    apparent power held inside the inverter capacity cone."""
    s_cap = unit.capacity_kva / base.power_kw
    p_vars: dict[int, VariableRef] = {}
    q_vars: dict[int, VariableRef] = {}
    for t in times:
        forecast = unit.forecast_kw[t] / base.power_kw
        upper = min(forecast, unit.pf_at(t) * s_cap)
        p = program.add_variable(f"ppv:{unit.id}:{t}", lower=0.0, upper=upper)
        q = program.add_variable(f"qpv:{unit.id}:{t}", lower=-s_cap, upper=s_cap)
        program.add_soc([s_cap, 1.0 * p, 1.0 * q], tag=f"pvcap:{unit.id}:{t}")
        p_vars[t], q_vars[t] = p, q
    return PvVars(unit=unit, p=p_vars, q=q_vars)


def emit_dg(
    program: ConicProgram, unit: DgUnit, times: Sequence[int], base: PerUnitBase, dt: float
) -> DgVars:
    """Box output limits plus inter-interval ramp limits; the first interval
    ramps against ``initial_output_kw`` (default: the minimum output)."""
    p_min = unit.p_min_kw / base.power_kw
    p_max = unit.p_max_kw / base.power_kw
    ramp_up = unit.ramp_up_kw_per_h * dt / base.power_kw
    ramp_down = unit.ramp_down_kw_per_h * dt / base.power_kw
    initial = (
        unit.p_min_kw if unit.initial_output_kw is None else unit.initial_output_kw
    ) / base.power_kw
    p_vars: dict[int, VariableRef] = {}
    prev: VariableRef | None = None
    for t in times:
        p = program.add_variable(f"pdg:{unit.id}:{t}", lower=p_min, upper=p_max)
        if prev is None:
            program.add_linear(1.0 * p, "<=", initial + ramp_up, tag=f"dgrampup:{unit.id}:{t}")
            program.add_linear(1.0 * p, ">=", initial - ramp_down, tag=f"dgrampdn:{unit.id}:{t}")
        else:
            program.add_linear(p - prev, "<=", ramp_up, tag=f"dgrampup:{unit.id}:{t}")
            program.add_linear(prev - p, "<=", ramp_down, tag=f"dgrampdn:{unit.id}:{t}")
        p_vars[t] = p
        prev = p
    return DgVars(unit=unit, p=p_vars)


def emit_storage(
    program: ConicProgram,
    unit: StorageUnit | EvUnit,
    times: Sequence[int],
    base: PerUnitBase,
    dt: float,
    mode: str,
) -> StorageVars:
    """Charge/discharge exclusivity, indicator-linked power bounds, the state
    of charge recursion with bounds, and the terminal condition.

    BESS mode: the availability window is the whole horizon and the final
    state of charge may not fall below the initial energy (otherwise the
    optimizer drains the battery for free).  EV mode: power and indicators are
    zero outside [arrival, departure]; the departure state of charge must
    cover the next trip, verified reachable before solving.
    """
    if mode not in ("bess", "ev"):
        raise ValueError(f"storage mode must be 'bess' or 'ev', got {mode!r}")
    horizon = max(times) + 1
    if mode == "ev":
        ev: EvUnit = unit  # type: ignore[assignment]
        if ev.departure >= horizon or ev.arrival < 0:
            raise InfeasibleWindowError(
                f"{unit.id}: window [{ev.arrival}, {ev.departure}] outside horizon {horizon}"
            )
        window = tuple(ev.window(horizon))
        soc_start = ev.soc_init_kwh
        # Reachability: even charging flat-out the whole window must cover the trip.
        reachable = min(
            ev.soc_max_kwh,
            ev.soc_init_kwh + ev.eff_ch * ev.p_ch_max_kw * dt * len(window),
        )
        if ev.trip_energy_kwh > reachable + 1e-9:
            raise InfeasibleWindowError(
                f"{unit.id}: trip energy {ev.trip_energy_kwh} kWh unreachable within "
                f"window [{ev.arrival}, {ev.departure}] (max attainable {reachable:.3f} kWh)"
            )
    else:
        window = tuple(times)
        soc_start = unit.energy_init_kwh

    s_kw = base.power_kw
    p_ch_max = unit.p_ch_max_kw / s_kw
    p_dch_max = unit.p_dch_max_kw / s_kw
    soc_lo = unit.soc_min_kwh / s_kw
    soc_hi = unit.soc_max_kwh / s_kw
    soc0 = soc_start / s_kw
    in_window = set(window)

    x_ch: dict[int, VariableRef] = {}
    x_dch: dict[int, VariableRef] = {}
    p_ch: dict[int, VariableRef] = {}
    p_dch: dict[int, VariableRef] = {}
    soc: dict[int, VariableRef] = {}
    prev_soc: VariableRef | None = None
    for t in times:
        active = t in in_window
        cap = 1.0 if active else 0.0
        x_ch[t] = program.add_variable(f"xch:{unit.id}:{t}", kind=BINARY, upper=cap)
        x_dch[t] = program.add_variable(f"xdch:{unit.id}:{t}", kind=BINARY, upper=cap)
        p_ch[t] = program.add_variable(
            f"pch:{unit.id}:{t}", lower=0.0, upper=p_ch_max if active else 0.0
        )
        p_dch[t] = program.add_variable(
            f"pdch:{unit.id}:{t}", lower=0.0, upper=p_dch_max if active else 0.0
        )
        if active:
            program.add_linear(x_ch[t] + x_dch[t], "<=", 1.0, tag=f"storexcl:{unit.id}:{t}")
            program.add_linear(
                p_ch[t] - p_ch_max * x_ch[t], "<=", 0.0, tag=f"chind:{unit.id}:{t}"
            )
            program.add_linear(
                p_dch[t] - p_dch_max * x_dch[t], "<=", 0.0, tag=f"dchind:{unit.id}:{t}"
            )
            s = program.add_variable(f"soc:{unit.id}:{t}", lower=soc_lo, upper=soc_hi)
            flow = (unit.eff_ch * dt) * p_ch[t] - (dt / unit.eff_dch) * p_dch[t]
            if prev_soc is None:
                program.add_linear(s - flow, "==", soc0, tag=f"socinit:{unit.id}:{t}")
            else:
                program.add_linear(s - prev_soc - flow, "==", 0.0, tag=f"socrec:{unit.id}:{t}")
            soc[t] = s
            prev_soc = s
    if prev_soc is not None:
        if mode == "ev":
            program.add_linear(
                1.0 * soc[window[-1]], ">=", unit.trip_energy_kwh / s_kw,
                tag=f"soctrip:{unit.id}",
            )
        else:
            program.add_linear(
                1.0 * prev_soc, ">=", soc0, tag=f"socterm:{unit.id}"
            )
    return StorageVars(
        unit=unit, mode=mode, x_ch=x_ch, x_dch=x_dch, p_ch=p_ch, p_dch=p_dch,
        soc=soc, window=window,
    )


def emit_flexload(
    program: ConicProgram, unit: FlexLoad, times: Sequence[int], base: PerUnitBase, dt: float
) -> FlexLoadVars:
    """Signed deviation within its bound, split into nonnegative parts so the
    objective can charge the absolute deviation (a signed cost would reward
    unlimited shedding).  The bus-level energy floor is emitted separately by
    :func:`emit_energy_floor` because it couples all flexible loads at a bus."""
    p_vars: dict[int, VariableRef] = {}
    pos: dict[int, VariableRef] = {}
    neg: dict[int, VariableRef] = {}
    for t in times:
        bound = unit.p_max_kw[t] / base.power_kw
        p = program.add_variable(f"pfl:{unit.id}:{t}", lower=-bound, upper=bound)
        p_pos = program.add_variable(f"pflpos:{unit.id}:{t}", lower=0.0, upper=bound)
        p_neg = program.add_variable(f"pflneg:{unit.id}:{t}", lower=0.0, upper=bound)
        program.add_linear(p - p_pos + p_neg, "==", 0.0, tag=f"flsplit:{unit.id}:{t}")
        p_vars[t], pos[t], neg[t] = p, p_pos, p_neg
    return FlexLoadVars(unit=unit, p=p_vars, p_pos=pos, p_neg=neg)


def emit_energy_floor(
    program: ConicProgram,
    case: NetworkCase,
    bus: int,
    flex_vars: Sequence[FlexLoadVars],
    times: Sequence[int],
) -> None:
    """Bus-level minimum-energy requirement over fixed plus flexible demand.

    Vacuous buses (no floor or no flexible load and an already-satisfied
    floor) are skipped; an unsatisfiable floor raises immediately rather than
    producing an opaque infeasible program.
    """
    spec = case.bus(bus)
    if spec.min_energy <= 0.0:
        return
    fixed_energy = float(sum(spec.fixed_load[t] for t in times)) * case.dt
    flex_bound = sum(
        float(fv.unit.p_max_kw[t]) / case.base.power_kw * case.dt
        for fv in flex_vars
        for t in times
    )
    if spec.min_energy > fixed_energy + flex_bound + 1e-12:
        raise DerParameterError(
            f"bus {bus}: min_energy {spec.min_energy} p.u.h exceeds fixed plus flexible "
            f"energy {fixed_energy + flex_bound:.6f} p.u.h"
        )
    if not flex_vars:
        return
    total = sum(fv.p[t] for fv in flex_vars for t in times) * case.dt
    program.add_linear(total, ">=", spec.min_energy - fixed_energy, tag=f"energy_floor:{bus}")


# ---------------------------------------------------------------------------
# Real-time flexibility envelopes
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FlexEnvelope:
    """Stage-2 upward/downward flexibility variables for one DER.

    ``uf_max`` / ``df_max`` are the context bounds (the tightest cap assuming
    the direction indicator is on) used by replay checks; missing directions
    (e.g. PV upward) have empty dictionaries.
    """

    der_id: str
    kind: str
    bus: int
    times: tuple[int, ...]
    uf: dict[int, VariableRef]
    df: dict[int, VariableRef]
    y_uf: dict[int, VariableRef]
    y_df: dict[int, VariableRef]
    uf_max: dict[int, float]
    df_max: dict[int, float]


def _stage1_series(stage1_values: Mapping[str, Mapping[str, np.ndarray]], der_id: str, key: str):
    try:
        unit_values = stage1_values[der_id]
    except KeyError:
        raise KeyError(f"missing day-ahead values for DER {der_id!r}") from None
    try:
        return unit_values[key]
    except KeyError:
        raise KeyError(f"missing day-ahead series {key!r} for DER {der_id!r}") from None


def emit_flex_envelopes(
    program: ConicProgram,
    portfolio: DerPortfolio,
    stage1_values: Mapping[str, Mapping[str, np.ndarray]],
    times: Sequence[int],
    base: PerUnitBase,
    dt: float,
) -> list[FlexEnvelope]:
    """Emit every DER's real-time flexibility feasible set around the
    day-ahead dispatch in ``stage1_values`` (per-unit series keyed by DER id).

    Storage and EV adjustments are single-interval power deviations capped by
    the day-ahead headroom and state-of-charge margins; flexible loads can
    only undo (upward) or deepen (downward) their day-ahead deviation; PV
    curtails only; DGs move within box and per-interval ramp caps.
    """
    s_kw = base.power_kw
    envelopes: list[FlexEnvelope] = []

    def binary_pair(uid: str, t: int, active: bool):
        cap = 1.0 if active else 0.0
        y_u = program.add_variable(f"yuf:{uid}:{t}", kind=BINARY, upper=cap)
        y_d = program.add_variable(f"ydf:{uid}:{t}", kind=BINARY, upper=cap)
        if active:
            program.add_linear(y_u + y_d, "<=", 1.0, tag=f"flexexcl:{uid}:{t}")
        return y_u, y_d

    for unit in (*portfolio.bess, *portfolio.ev):
        is_ev = isinstance(unit, EvUnit)
        window = set(unit.window(max(times) + 1)) if is_ev else set(times)
        p_ch = _stage1_series(stage1_values, unit.id, "p_ch")
        p_dch = _stage1_series(stage1_values, unit.id, "p_dch")
        x_ch = _stage1_series(stage1_values, unit.id, "x_ch")
        x_dch = _stage1_series(stage1_values, unit.id, "x_dch")
        soc = _stage1_series(stage1_values, unit.id, "soc")
        p_ch_max = unit.p_ch_max_kw / s_kw
        p_dch_max = unit.p_dch_max_kw / s_kw
        soc_hi = unit.soc_max_kwh / s_kw
        soc_lo = unit.soc_min_kwh / s_kw
        uf, df, y_ufs, y_dfs, uf_max, df_max = {}, {}, {}, {}, {}, {}
        for t in times:
            active = t in window
            y_u, y_d = binary_pair(unit.id, t, active)
            cap_df_power = max((p_ch_max * x_ch[t] - p_ch[t]) + p_dch[t], 0.0)
            cap_uf_power = max((p_dch_max * x_dch[t] - p_dch[t]) + p_ch[t], 0.0)
            cap_df_soc = max((soc_hi - soc[t]) / dt, 0.0)
            cap_uf_soc = max((soc[t] - soc_lo) / dt, 0.0)
            u = program.add_variable(f"uf:{unit.id}:{t}", lower=0.0,
                                     upper=min(cap_uf_power, cap_uf_soc) if active else 0.0)
            d = program.add_variable(f"df:{unit.id}:{t}", lower=0.0,
                                     upper=min(cap_df_power, cap_df_soc) if active else 0.0)
            if active:
                program.add_linear(d - cap_df_power * y_d, "<=", 0.0, tag=f"dfcap:{unit.id}:{t}")
                program.add_linear(u - cap_uf_power * y_u, "<=", 0.0, tag=f"ufcap:{unit.id}:{t}")
                # State-of-charge margins bind regardless of the indicators.
                program.add_linear(1.0 * d, "<=", cap_df_soc, tag=f"dfsoc:{unit.id}:{t}")
                program.add_linear(1.0 * u, "<=", cap_uf_soc, tag=f"ufsoc:{unit.id}:{t}")
            uf[t], df[t], y_ufs[t], y_dfs[t] = u, d, y_u, y_d
            uf_max[t] = min(cap_uf_power, cap_uf_soc) if active else 0.0
            df_max[t] = min(cap_df_power, cap_df_soc) if active else 0.0
        envelopes.append(
            FlexEnvelope(der_id=unit.id, kind="ev" if is_ev else "bess", bus=unit.bus,
                         times=tuple(times), uf=uf, df=df, y_uf=y_ufs, y_df=y_dfs,
                         uf_max=uf_max, df_max=df_max)
        )

    for fl in portfolio.flex:
        p_fl = _stage1_series(stage1_values, fl.id, "p_fl")
        uf, df, y_ufs, y_dfs, uf_max, df_max = {}, {}, {}, {}, {}, {}
        for t in times:
            y_u, y_d = binary_pair(fl.id, t, True)
            bound = fl.p_max_kw[t] / s_kw
            cap_uf = float(p_fl[t])           # undo a positive day-ahead shift
            cap_df = float(bound - p_fl[t])   # deepen consumption up to the bound
            u = program.add_variable(f"uf:{fl.id}:{t}", lower=0.0, upper=max(cap_uf, 0.0))
            d = program.add_variable(f"df:{fl.id}:{t}", lower=0.0, upper=max(cap_df, 0.0))
            program.add_linear(u - cap_uf * y_u, "<=", 0.0, tag=f"ufcap:{fl.id}:{t}")
            program.add_linear(d - cap_df * y_d, "<=", 0.0, tag=f"dfcap:{fl.id}:{t}")
            uf[t], df[t], y_ufs[t], y_dfs[t] = u, d, y_u, y_d
            uf_max[t] = max(cap_uf, 0.0)
            df_max[t] = max(cap_df, 0.0)
        envelopes.append(
            FlexEnvelope(der_id=fl.id, kind="fl", bus=fl.bus, times=tuple(times),
                         uf=uf, df=df, y_uf=y_ufs, y_df=y_dfs, uf_max=uf_max, df_max=df_max)
        )

    for pv in portfolio.pv:
        p_pv = _stage1_series(stage1_values, pv.id, "p")
        df, df_max = {}, {}
        for t in times:
            cap = max(float(p_pv[t]), 0.0)
            df[t] = program.add_variable(f"df:{pv.id}:{t}", lower=0.0, upper=cap)
            df_max[t] = cap
        envelopes.append(
            FlexEnvelope(der_id=pv.id, kind="pv", bus=pv.bus, times=tuple(times),
                         uf={}, df=df, y_uf={}, y_df={}, uf_max={}, df_max=df_max)
        )

    for dg in portfolio.dg:
        p_dg = _stage1_series(stage1_values, dg.id, "p")
        p_min = dg.p_min_kw / s_kw
        p_max = dg.p_max_kw / s_kw
        ramp_up = dg.ramp_up_kw_per_h * dt / s_kw
        ramp_down = dg.ramp_down_kw_per_h * dt / s_kw
        uf, df, y_ufs, y_dfs, uf_max, df_max = {}, {}, {}, {}, {}, {}
        for t in times:
            y_u, y_d = binary_pair(dg.id, t, True)
            cap_uf = max(p_max - float(p_dg[t]), 0.0)
            cap_df = max(float(p_dg[t]) - p_min, 0.0)
            u = program.add_variable(f"uf:{dg.id}:{t}", lower=0.0, upper=min(cap_uf, ramp_up))
            d = program.add_variable(f"df:{dg.id}:{t}", lower=0.0, upper=min(cap_df, ramp_down))
            program.add_linear(u - cap_uf * y_u, "<=", 0.0, tag=f"ufcap:{dg.id}:{t}")
            program.add_linear(d - cap_df * y_d, "<=", 0.0, tag=f"dfcap:{dg.id}:{t}")
            program.add_linear(1.0 * u, "<=", ramp_up, tag=f"uframp:{dg.id}:{t}")
            program.add_linear(1.0 * d, "<=", ramp_down, tag=f"dframp:{dg.id}:{t}")
            uf[t], df[t], y_ufs[t], y_dfs[t] = u, d, y_u, y_d
            uf_max[t] = min(cap_uf, ramp_up)
            df_max[t] = min(cap_df, ramp_down)
        envelopes.append(
            FlexEnvelope(der_id=dg.id, kind="dg", bus=dg.bus, times=tuple(times),
                         uf=uf, df=df, y_uf=y_ufs, y_df=y_dfs, uf_max=uf_max, df_max=df_max)
        )

    return envelopes


# ---------------------------------------------------------------------------
# Replay checks (independent recomputation)
# ---------------------------------------------------------------------------


def replay_soc(
    unit: StorageUnit | EvUnit,
    p_ch: np.ndarray,
    p_dch: np.ndarray,
    base: PerUnitBase,
    dt: float,
    window: Sequence[int],
) -> np.ndarray:
    """Recompute the state-of-charge trajectory exactly from powers (p.u.)."""
    start = (unit.soc_init_kwh if isinstance(unit, EvUnit) else unit.energy_init_kwh)
    soc = start / base.power_kw
    out = []
    for t in window:
        soc = soc + (unit.eff_ch * p_ch[t] - p_dch[t] / unit.eff_dch) * dt
        out.append(soc)
    return np.asarray(out)


def replay_flex_bounds(envelopes: Sequence[FlexEnvelope], value_of) -> float:
    """Max violation of the envelope bounds at a solution (``value_of`` maps a
    variable ref to its value).  Checks UF/DF against the context caps, the
    indicator linkage, and direction exclusivity."""
    worst = 0.0
    for env in envelopes:
        for t in env.times:
            u = value_of(env.uf[t]) if t in env.uf else 0.0
            d = value_of(env.df[t]) if t in env.df else 0.0
            worst = max(worst, -u, -d)
            worst = max(worst, u - env.uf_max.get(t, 0.0), d - env.df_max.get(t, 0.0))
            if t in env.y_uf:
                yu = value_of(env.y_uf[t])
                yd = value_of(env.y_df[t])
                worst = max(worst, yu + yd - 1.0)
                worst = max(worst, u - yu * env.uf_max.get(t, 0.0))
                worst = max(worst, d - yd * env.df_max.get(t, 0.0))
    return worst
