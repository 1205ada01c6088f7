"""Radial distribution network model.

Case data structures, SI <-> per-unit conversion, JSON case files, and the
rooted-tree topology analysis (parent map, depth order) that constraint
emission relies on.

All electrical quantities inside :class:`NetworkCase` are stored in per-unit
on the case's own base: powers in p.u. of ``base_power``, impedances in p.u.
of ``base_voltage**2 / base_power``, energies in p.u.-hours.  Case files use
SI units (kW, kVar, ohm, kV) by default and are converted on load; a "pu"
mode dumps the internal state exactly so save/load round-trips bit-for-bit.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SCHEMA_NAME = "equiflex-case-v1"

#: Quantity kinds understood by :func:`to_per_unit` / :func:`from_per_unit`,
#: mapped to the SI unit they expect.
_QUANTITY_KINDS = (
    "power_mw",
    "power_kw",
    "reactive_kvar",
    "apparent_kva",
    "impedance_ohm",
    "voltage_kv",
    "energy_kwh",
)


class CaseFormatError(ValueError):
    """A case file could not be parsed against the documented schema."""


class CaseValidationError(ValueError):
    """A structurally valid case violates network invariants."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PerUnitBase:
    """Per-unit normalization base.

    Attributes:
        power_mva: apparent-power base (MVA), strictly positive.
        voltage_kv: line-to-line voltage base (kV), strictly positive.
    """

    power_mva: float
    voltage_kv: float

    def __post_init__(self) -> None:
        if not (self.power_mva > 0 and self.voltage_kv > 0):
            raise CaseValidationError(
                f"per-unit base must be strictly positive, got "
                f"power={self.power_mva} MVA, voltage={self.voltage_kv} kV"
            )

    @property
    def z_base_ohm(self) -> float:
        """Impedance base: voltage_kv**2 / power_mva (ohm)."""
        return self.voltage_kv**2 / self.power_mva

    @property
    def power_kw(self) -> float:
        """Power base expressed in kW."""
        return self.power_mva * 1000.0


@dataclass(frozen=True, eq=False)
class BusSpec:
    """One network bus.

    Attributes:
        id: integer bus index.
        kind: "pcc" for a substation bus coupled to the upstream grid,
            "load" otherwise.
        v_min, v_max: voltage-magnitude bounds (p.u.).
        fixed_load: inflexible active-power demand profile, length ``horizon``
            (p.u.; converted from kW on load).
        load_power_factor: lagging power factor of the fixed load in (0, 1];
            reactive demand is ``fixed_load * tan(acos(pf))``.
        min_energy: minimum energy that must be served at this bus over the
            horizon, fixed plus flexible consumption (p.u.-hours).
    """

    id: int
    kind: str
    v_min: float
    v_max: float
    fixed_load: np.ndarray
    load_power_factor: float = 1.0
    min_energy: float = 0.0

    @property
    def tan_phi(self) -> float:
        """Reactive-to-active ratio implied by the load power factor."""
        pf = self.load_power_factor
        return math.sqrt(max(1.0 - pf * pf, 0.0)) / pf

    @property
    def reactive_load(self) -> np.ndarray:
        """Reactive demand profile (p.u.), derived from the power factor."""
        return self.fixed_load * self.tan_phi


@dataclass(frozen=True)
class LineSpec:
    """One distribution line (stored undirected; orientation comes from the
    topology report).

    Attributes:
        from_bus, to_bus: endpoint bus ids.
        r, x: series resistance/reactance (p.u.).
        s_max: apparent-power rating (p.u.).
    """

    from_bus: int
    to_bus: int
    r: float
    x: float
    s_max: float


@dataclass(frozen=True, eq=False)
class NetworkCase:
    """A validated radial network over a discrete horizon.

    Treat instances as immutable: they are shared freely across solves.
    """

    buses: tuple[BusSpec, ...]
    lines: tuple[LineSpec, ...]
    base: PerUnitBase
    horizon: int
    dt: float
    pcc_buses: tuple[int, ...]
    v_ref: float = 1.0

    def bus(self, bus_id: int) -> BusSpec:
        try:
            return self._bus_map[bus_id]
        except AttributeError:
            object.__setattr__(self, "_bus_map", {b.id: b for b in self.buses})
            return self._bus_map[bus_id]

    @property
    def bus_ids(self) -> tuple[int, ...]:
        return tuple(b.id for b in self.buses)

    @property
    def times(self) -> range:
        return range(self.horizon)

    def total_fixed_load(self) -> np.ndarray:
        """Network-wide fixed active load profile (p.u.)."""
        total = np.zeros(self.horizon)
        for bus in self.buses:
            total += bus.fixed_load
        return total


@dataclass(frozen=True, eq=False)
class PowerFlowState:
    """Branch-flow network state at one operating point.

    All arrays have length ``horizon`` and per-unit scaling.  Line-indexed
    dictionaries are keyed by the (parent, child) orientation from
    :func:`validate_topology`.
    """

    v_sq: dict[int, np.ndarray]
    i_sq: dict[tuple[int, int], np.ndarray]
    p_flow: dict[tuple[int, int], np.ndarray]
    q_flow: dict[tuple[int, int], np.ndarray]
    p_ug: dict[int, np.ndarray]
    q_ug: dict[int, np.ndarray]

    def p_ug_total(self) -> np.ndarray:
        """Aggregate substation import profile (p.u.)."""
        arrays = list(self.p_ug.values())
        if not arrays:
            raise ValueError("state has no substation buses")
        return np.sum(arrays, axis=0)


@dataclass(frozen=True)
class OrientedLine:
    """A line oriented parent -> child by the rooted traversal."""

    index: int
    parent: int
    child: int

    @property
    def key(self) -> tuple[int, int]:
        return (self.parent, self.child)


@dataclass(frozen=True)
class TopologyReport:
    """Result of :func:`validate_topology`.

    ``order`` lists every reachable bus exactly once, parents before
    children; ``oriented_lines`` matches that traversal.  ``violations`` is
    empty when the case is a connected radial feeder with consistent data.
    """

    connected: bool
    radial: bool
    root: int | None
    parent: dict[int, int]
    depth: dict[int, int]
    order: tuple[int, ...]
    oriented_lines: tuple[OrientedLine, ...]
    violations: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def children(self) -> dict[int, list[int]]:
        """Child lists per bus, in traversal order."""
        out: dict[int, list[int]] = {b: [] for b in self.order}
        for line in self.oriented_lines:
            out[line.parent].append(line.child)
        return out


# ---------------------------------------------------------------------------
# Per-unit conversion
# ---------------------------------------------------------------------------


def _scale_for(kind: str, base: PerUnitBase) -> float:
    if base.power_mva <= 0 or base.voltage_kv <= 0:
        raise CaseValidationError("per-unit base must be strictly positive")
    if kind == "power_mw":
        return base.power_mva
    if kind in ("power_kw", "reactive_kvar", "apparent_kva", "energy_kwh"):
        return base.power_mva * 1000.0
    if kind == "impedance_ohm":
        return base.z_base_ohm
    if kind == "voltage_kv":
        return base.voltage_kv
    raise ValueError(f"unknown quantity kind {kind!r}; expected one of {_QUANTITY_KINDS}")


def to_per_unit(values: Any, base: PerUnitBase, kind: str) -> Any:
    """Convert SI quantities to per-unit on ``base``.

    ``kind`` selects the SI unit of ``values`` (see ``_QUANTITY_KINDS``);
    energies divide by the power base expressed in kW so one p.u.-hour equals
    ``base.power_kw`` kWh.  Accepts scalars or numpy arrays.
    """
    scale = _scale_for(kind, base)
    arr = np.asarray(values, dtype=float) / scale
    return float(arr) if arr.ndim == 0 else arr


def from_per_unit(values: Any, base: PerUnitBase, kind: str) -> Any:
    """Exact inverse of :func:`to_per_unit`."""
    scale = _scale_for(kind, base)
    arr = np.asarray(values, dtype=float) * scale
    return float(arr) if arr.ndim == 0 else arr


# ---------------------------------------------------------------------------
# Topology validation
# ---------------------------------------------------------------------------


def _cycle_through(edge: tuple[int, int], parent: Mapping[int, int], root_depth: Mapping[int, int]) -> list[int]:
    """Return the bus cycle closed by a non-tree edge (u, v)."""
    u, v = edge
    pu, pv = [u], [v]
    cu, cv = u, v
    while root_depth[cu] > root_depth[cv]:
        cu = parent[cu]
        pu.append(cu)
    while root_depth[cv] > root_depth[cu]:
        cv = parent[cv]
        pv.append(cv)
    while cu != cv:
        cu, cv = parent[cu], parent[cv]
        pu.append(cu)
        pv.append(cv)
    return pu + pv[-2::-1]


def validate_topology(case: NetworkCase, allow_multiple_pcc: bool = False) -> TopologyReport:
    """Analyze connectivity, radiality, and data bounds of ``case``.

    Never raises: every problem found is reported (naming the offending bus
    or line) in ``violations``.  The traversal artifacts (parent map, depth,
    order) describe the spanning tree rooted at the lowest-id PCC bus and are
    meaningful even for non-radial input.
    """
    violations: list[str] = []
    bus_ids = [b.id for b in case.buses]
    seen: set[int] = set()
    for b in bus_ids:
        if b in seen:
            violations.append(f"duplicate bus id {b}")
        seen.add(b)
    id_set = set(bus_ids)

    for bus in case.buses:
        if not (0 < bus.v_min < bus.v_max):
            violations.append(
                f"bus {bus.id}: voltage bounds must satisfy 0 < v_min < v_max "
                f"(got [{bus.v_min}, {bus.v_max}])"
            )
        if bus.kind not in ("pcc", "load"):
            violations.append(f"bus {bus.id}: unknown kind {bus.kind!r}")
        if len(bus.fixed_load) != case.horizon:
            violations.append(
                f"bus {bus.id}: fixed_load has length {len(bus.fixed_load)}, "
                f"expected horizon {case.horizon}"
            )
        if np.any(np.asarray(bus.fixed_load) < 0):
            violations.append(f"bus {bus.id}: fixed_load must be nonnegative")
        if not (0 < bus.load_power_factor <= 1):
            violations.append(
                f"bus {bus.id}: load_power_factor {bus.load_power_factor} outside (0, 1]"
            )
        if bus.min_energy < 0:
            violations.append(f"bus {bus.id}: min_energy must be nonnegative")

    for i, line in enumerate(case.lines):
        label = f"line {line.from_bus}-{line.to_bus}"
        if line.from_bus == line.to_bus:
            violations.append(f"{label}: self-loop")
        if line.from_bus not in id_set or line.to_bus not in id_set:
            violations.append(f"{label}: references a bus that does not exist")
        if line.r < 0 or line.x < 0:
            violations.append(f"{label}: negative impedance (r={line.r}, x={line.x})")
        if not line.s_max > 0:
            violations.append(f"{label}: s_max must be strictly positive")

    if case.horizon < 1:
        violations.append(f"horizon must be >= 1, got {case.horizon}")
    if not case.dt > 0:
        violations.append(f"dt must be > 0, got {case.dt}")

    pcc = sorted(set(case.pcc_buses))
    for p in pcc:
        if p not in id_set:
            violations.append(f"pcc bus {p} does not exist")
        elif case.bus(p).kind != "pcc":
            violations.append(f"bus {p} listed as PCC but has kind {case.bus(p).kind!r}")
    if not pcc:
        violations.append("no PCC bus defined")
    elif len(pcc) > 1 and not allow_multiple_pcc:
        violations.append(f"multiple PCC buses {pcc} but multiple PCCs not enabled")

    # Rooted BFS over the undirected line graph.
    adjacency: dict[int, list[tuple[int, int]]] = {b: [] for b in bus_ids}
    for i, line in enumerate(case.lines):
        if line.from_bus in id_set and line.to_bus in id_set and line.from_bus != line.to_bus:
            adjacency[line.from_bus].append((line.to_bus, i))
            adjacency[line.to_bus].append((line.from_bus, i))
    for lst in adjacency.values():
        lst.sort()

    root = pcc[0] if pcc and pcc[0] in id_set else (bus_ids[0] if bus_ids else None)
    parent: dict[int, int] = {}
    depth: dict[int, int] = {}
    order: list[int] = []
    oriented: list[OrientedLine] = []
    tree_edges: set[int] = set()
    cycle_named = False
    if root is not None:
        depth[root] = 0
        order.append(root)
        queue = deque([root])
        visited = {root}
        while queue:
            u = queue.popleft()
            for v, line_index in adjacency[u]:
                if line_index in tree_edges:
                    continue
                if v in visited:
                    if not cycle_named:
                        cycle = _cycle_through((u, v), parent, depth)
                        violations.append(
                            f"line {case.lines[line_index].from_bus}-"
                            f"{case.lines[line_index].to_bus} closes a cycle through "
                            f"buses {cycle}"
                        )
                        cycle_named = True
                    continue
                visited.add(v)
                tree_edges.add(line_index)
                parent[v] = u
                depth[v] = depth[u] + 1
                order.append(v)
                oriented.append(OrientedLine(index=line_index, parent=u, child=v))
                queue.append(v)

    connected = len(order) == len(bus_ids) and bool(bus_ids)
    if not connected and root is not None:
        unreachable = sorted(id_set - set(order))
        violations.append(f"buses {unreachable} are not connected to the PCC root {root}")
    radial = connected and len(case.lines) == len(bus_ids) - 1
    if connected and len(case.lines) != len(bus_ids) - 1:
        violations.append(
            f"radial feeder requires |lines| = |buses| - 1, got {len(case.lines)} lines "
            f"for {len(bus_ids)} buses"
        )

    return TopologyReport(
        connected=connected,
        radial=radial,
        root=root,
        parent=parent,
        depth=depth,
        order=tuple(order),
        oriented_lines=tuple(oriented),
        violations=tuple(violations),
    )


# ---------------------------------------------------------------------------
# Case file I/O
# ---------------------------------------------------------------------------


def _require(mapping: Mapping[str, Any], key: str, context: str) -> Any:
    if key not in mapping:
        raise CaseFormatError(f"{context}: missing required key {key!r}")
    return mapping[key]


def _profile(raw: Any, horizon: int, shape: np.ndarray | None, context: str) -> np.ndarray:
    """Expand a scalar-or-list load entry to a length-``horizon`` profile."""
    if isinstance(raw, (int, float)):
        if shape is not None:
            return float(raw) * shape
        return np.full(horizon, float(raw))
    arr = np.asarray(raw, dtype=float)
    if arr.shape != (horizon,):
        raise CaseFormatError(
            f"{context}: profile has length {arr.size}, expected horizon {horizon}"
        )
    return arr


def case_from_dict(doc: Mapping[str, Any]) -> NetworkCase:
    """Build and validate a :class:`NetworkCase` from a parsed case document."""
    if not isinstance(doc, Mapping):
        raise CaseFormatError("case document must be a JSON object")
    units = doc.get("units", "si")
    if units not in ("si", "pu"):
        raise CaseFormatError(f"units must be 'si' or 'pu', got {units!r}")
    base_doc = _require(doc, "base", "case")
    try:
        base = PerUnitBase(
            power_mva=float(_require(base_doc, "power_mva", "base")),
            voltage_kv=float(_require(base_doc, "voltage_kv", "base")),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, CaseValidationError):
            raise
        raise CaseFormatError(f"base: {exc}") from exc
    horizon = int(_require(doc, "horizon", "case"))
    dt = float(_require(doc, "dt", "case"))

    shape = None
    if "load_shape" in doc:
        shape = np.asarray(doc["load_shape"], dtype=float)
        if horizon >= 1 and shape.shape != (horizon,):
            raise CaseFormatError(
                f"load_shape has length {shape.size}, expected horizon {horizon}"
            )

    defaults = doc.get("bus_defaults", {})
    buses: list[BusSpec] = []
    for raw in _require(doc, "buses", "case"):
        context = f"bus {raw.get('id', '?')}"
        try:
            bus_id = int(_require(raw, "id", context))
            kind = str(raw.get("kind", "load"))
            v_min = float(raw.get("v_min", defaults.get("v_min", 0.9)))
            v_max = float(raw.get("v_max", defaults.get("v_max", 1.1)))
            pf = float(
                raw.get("load_power_factor", defaults.get("load_power_factor", 1.0))
            )
            if units == "si":
                load = _profile(raw.get("fixed_load_kw", 0.0), horizon, shape, context)
                load = to_per_unit(load, base, "power_kw")
                min_energy = to_per_unit(
                    float(raw.get("min_energy_kwh", 0.0)), base, "energy_kwh"
                )
            else:
                load = _profile(raw.get("fixed_load", 0.0), horizon, shape, context)
                min_energy = float(raw.get("min_energy", 0.0))
        except (TypeError, ValueError) as exc:
            raise CaseFormatError(f"{context}: {exc}") from exc
        buses.append(
            BusSpec(
                id=bus_id,
                kind=kind,
                v_min=v_min,
                v_max=v_max,
                fixed_load=load,
                load_power_factor=pf,
                min_energy=min_energy,
            )
        )

    lines: list[LineSpec] = []
    for raw in _require(doc, "lines", "case"):
        context = f"line {raw.get('from', '?')}-{raw.get('to', '?')}"
        try:
            if units == "si":
                r = to_per_unit(float(_require(raw, "r_ohm", context)), base, "impedance_ohm")
                x = to_per_unit(float(_require(raw, "x_ohm", context)), base, "impedance_ohm")
                s_max = to_per_unit(float(_require(raw, "s_max_kva", context)), base, "apparent_kva")
            else:
                r = float(_require(raw, "r", context))
                x = float(_require(raw, "x", context))
                s_max = float(_require(raw, "s_max", context))
            lines.append(
                LineSpec(
                    from_bus=int(_require(raw, "from", context)),
                    to_bus=int(_require(raw, "to", context)),
                    r=r,
                    x=x,
                    s_max=s_max,
                )
            )
        except (TypeError, ValueError) as exc:
            raise CaseFormatError(f"{context}: {exc}") from exc

    pcc_buses = tuple(int(b) for b in doc.get("pcc_buses", ())) or tuple(
        b.id for b in buses if b.kind == "pcc"
    )
    case = NetworkCase(
        buses=tuple(buses),
        lines=tuple(lines),
        base=base,
        horizon=horizon,
        dt=dt,
        pcc_buses=pcc_buses,
        v_ref=float(doc.get("v_ref", 1.0)),
    )
    report = validate_topology(case, allow_multiple_pcc=bool(doc.get("allow_multiple_pcc", False)))
    if not report.ok:
        raise CaseValidationError("; ".join(report.violations))
    return case


def case_to_dict(case: NetworkCase) -> dict[str, Any]:
    """Serialize ``case`` exactly (per-unit mode); inverse of ``case_from_dict``."""
    return {
        "schema": SCHEMA_NAME,
        "units": "pu",
        "base": {"power_mva": case.base.power_mva, "voltage_kv": case.base.voltage_kv},
        "horizon": case.horizon,
        "dt": case.dt,
        "v_ref": case.v_ref,
        "allow_multiple_pcc": len(case.pcc_buses) > 1,
        "pcc_buses": list(case.pcc_buses),
        "buses": [
            {
                "id": b.id,
                "kind": b.kind,
                "v_min": b.v_min,
                "v_max": b.v_max,
                "fixed_load": [float(v) for v in b.fixed_load],
                "load_power_factor": b.load_power_factor,
                "min_energy": b.min_energy,
            }
            for b in case.buses
        ],
        "lines": [
            {
                "from": ln.from_bus,
                "to": ln.to_bus,
                "r": ln.r,
                "x": ln.x,
                "s_max": ln.s_max,
            }
            for ln in case.lines
        ],
    }


def load_case(path: str | Path, format: str = "json") -> NetworkCase:
    """Load and validate a case file.

    Raises :class:`CaseFormatError` for malformed documents and
    :class:`CaseValidationError` for cases violating network invariants; both
    messages name the offending element.
    """
    if format != "json":
        raise CaseFormatError(f"unsupported case format {format!r}")
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CaseFormatError(f"cannot read case file {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseFormatError(f"case file {path} is not valid JSON: {exc}") from exc
    return case_from_dict(doc)


def save_case(case: NetworkCase, path: str | Path) -> None:
    """Write ``case`` in the exact per-unit mode (bit-identical round-trip)."""
    Path(path).write_text(json.dumps(case_to_dict(case), indent=2) + "\n")


def induced_subfeeder(case: NetworkCase, bus_ids: Iterable[int]) -> NetworkCase:
    """Restrict ``case`` to a bus subset (which must form a connected subtree
    containing a PCC bus); used to carve small study feeders out of a case."""
    keep = set(int(b) for b in bus_ids)
    missing = keep - set(case.bus_ids)
    if missing:
        raise CaseValidationError(f"subfeeder buses {sorted(missing)} do not exist")
    buses = tuple(b for b in case.buses if b.id in keep)
    lines = tuple(ln for ln in case.lines if ln.from_bus in keep and ln.to_bus in keep)
    pcc = tuple(b for b in case.pcc_buses if b in keep)
    sub = NetworkCase(
        buses=buses,
        lines=lines,
        base=case.base,
        horizon=case.horizon,
        dt=case.dt,
        pcc_buses=pcc,
        v_ref=case.v_ref,
    )
    report = validate_topology(sub, allow_multiple_pcc=len(pcc) > 1)
    if not report.ok:
        raise CaseValidationError("; ".join(report.violations))
    return sub


def builtin_ieee33() -> NetworkCase:
    """The bundled 33-bus radial test feeder.

    Branch impedances and nominal bus loads follow the published 33-bus data
    (12.66 kV, 3715 kW / 2300 kVar total); bus 1 is the PCC.  Loads are scaled
    over 24 hours by the documented daily shape carried in the data file, and
    line ratings are sized at 1.5x the downstream nominal apparent load
    (500 kVA floor) as documented in the case schema notes.
    """
    with resources.files("equiflex.data").joinpath("ieee33.json").open() as fh:
        doc = json.load(fh)
    return case_from_dict(doc)
