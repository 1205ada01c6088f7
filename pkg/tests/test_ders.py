"""DER feasible-set emission tests.

Each emission rule is checked against a hand-computed optimum of a tiny
program (the oracle), plus the structural invariants: charge/discharge
exclusivity, state-of-charge replay, window zeroing, and envelope caps.
"""

import numpy as np
import pytest

from equiflex.conic import (
    ConicProgram,
    Tolerances,
    refix_and_dualize,
    solve_mixed_integer,
    solve_relaxation,
)
from equiflex.ders import (
    DerParameterError,
    DerPortfolio,
    DgUnit,
    EvUnit,
    FlexLoad,
    InfeasibleWindowError,
    PvUnit,
    StorageUnit,
    emit_dg,
    emit_energy_floor,
    emit_flex_envelopes,
    emit_flexload,
    emit_pv,
    emit_storage,
    replay_flex_bounds,
    replay_soc,
)
from equiflex.grid import BusSpec, LineSpec, NetworkCase, PerUnitBase

TOL = Tolerances()

# power_kw == 1.0 so per-unit numbers equal kilowatts in these tests
KW_BASE = PerUnitBase(power_mva=0.001, voltage_kv=1.0)


def solve(program, minimize):
    program.set_objective(minimize)
    sol = solve_relaxation(program.seal(), TOL)
    assert sol.status == "optimal", sol.status
    return sol


def solve_mi(program, minimize):
    program.set_objective(minimize)
    report = solve_mixed_integer(program.seal(), TOL)
    assert report.incumbent.status == "optimal"
    return report


def enumerate_best(program):
    """Brute-force oracle: best objective over all binary assignments."""
    binaries = [v for v in program.variables if v.kind == "binary"]
    best = None
    for mask in range(2 ** len(binaries)):
        assignment = {
            v.id: (mask >> i) & 1 for i, v in enumerate(binaries)
        }
        if any(not (v.lower <= assignment[v.id] <= v.upper) for v in binaries):
            continue
        sol = refix_and_dualize(program, assignment, TOL)
        if sol.status != "optimal":
            continue
        if best is None or sol.objective_value < best - 1e-12:
            best = sol.objective_value
    return best


class TestUnitValidation:
    def test_pv_rejects_bad_power_factor(self):
        with pytest.raises(DerParameterError, match="pv1"):
            PvUnit(id="pv1", bus=5, capacity_kva=5.0,
                   forecast_kw=np.zeros(4), power_factor_limit=1.2)

    def test_dg_rejects_inverted_box(self):
        with pytest.raises(DerParameterError, match="dg1"):
            DgUnit(id="dg1", bus=2, p_min_kw=50.0, p_max_kw=20.0,
                   ramp_up_kw_per_h=10.0, ramp_down_kw_per_h=10.0,
                   cost_usd_per_kwh=0.3)

    def test_storage_rejects_disordered_soc(self):
        with pytest.raises(DerParameterError, match="b1"):
            StorageUnit(id="b1", bus=3, p_ch_max_kw=5.0, p_dch_max_kw=5.0,
                        eff_ch=0.95, eff_dch=0.95, energy_init_kwh=25.0,
                        capacity_kwh=20.0, soc_min_kwh=2.0, soc_max_kwh=20.0,
                        cost_usd_per_kwh=0.01)

    def test_ev_trip_beyond_capacity_is_unreachable(self):
        with pytest.raises(InfeasibleWindowError, match="ev1"):
            _ev(trip_energy_kwh=25.0, soc_max_kwh=20.0)

    def test_ev_rejects_backwards_window(self):
        with pytest.raises(DerParameterError, match="arrival"):
            _ev(arrival=5, departure=5)

    def test_portfolio_rejects_duplicate_ids(self):
        fl = FlexLoad(id="u1", bus=2, p_max_kw=np.ones(4), cost_usd_per_kwh=0.05)
        dg = DgUnit(id="u1", bus=3, p_min_kw=0.0, p_max_kw=10.0,
                    ramp_up_kw_per_h=10.0, ramp_down_kw_per_h=10.0,
                    cost_usd_per_kwh=0.3)
        with pytest.raises(DerParameterError, match="duplicate"):
            DerPortfolio(dg=(dg,), flex=(fl,)).validate_against(_case())

    def test_portfolio_rejects_unknown_bus(self):
        fl = FlexLoad(id="f9", bus=99, p_max_kw=np.ones(4), cost_usd_per_kwh=0.05)
        with pytest.raises(DerParameterError, match="bus 99"):
            DerPortfolio(flex=(fl,)).validate_against(_case())

    def test_portfolio_rejects_unknown_owner(self):
        fl = FlexLoad(id="f1", bus=2, p_max_kw=np.ones(4),
                      cost_usd_per_kwh=0.05, owner="ghost")
        with pytest.raises(DerParameterError, match="ghost"):
            DerPortfolio(flex=(fl,)).validate_against(_case(), actor_ids=["a1"])


def _case(horizon: int = 4) -> NetworkCase:
    buses = (
        BusSpec(id=1, kind="pcc", v_min=0.9, v_max=1.1,
                fixed_load=np.zeros(horizon), load_power_factor=1.0, min_energy=0.0),
        BusSpec(id=2, kind="load", v_min=0.9, v_max=1.1,
                fixed_load=np.full(horizon, 0.001), load_power_factor=0.95, min_energy=0.0),
        BusSpec(id=3, kind="load", v_min=0.9, v_max=1.1,
                fixed_load=np.full(horizon, 0.001), load_power_factor=0.95, min_energy=0.0),
    )
    lines = (
        LineSpec(from_bus=1, to_bus=2, r=0.01, x=0.01, s_max=1.0),
        LineSpec(from_bus=2, to_bus=3, r=0.01, x=0.01, s_max=1.0),
    )
    return NetworkCase(buses=buses, lines=lines, base=KW_BASE,
                       horizon=horizon, dt=1.0, pcc_buses=(1,))


def _ev(**overrides) -> EvUnit:
    params = dict(id="ev1", bus=2, p_ch_max_kw=5.0, p_dch_max_kw=5.0,
                  eff_ch=1.0, eff_dch=1.0, capacity_kwh=20.0,
                  soc_min_kwh=0.0, soc_max_kwh=20.0, soc_init_kwh=5.0,
                  trip_energy_kwh=12.0, arrival=2, departure=4,
                  cost_usd_per_kwh=0.02)
    params.update(overrides)
    return EvUnit(**params)


class TestPvEmission:
    def test_output_capped_by_power_factor_share(self):
        # forecast 6 kW but pf 0.8 of a 5 kVA inverter allows only 4 kW
        unit = PvUnit(id="pv1", bus=2, capacity_kva=5.0,
                      forecast_kw=np.array([6.0]), power_factor_limit=0.8)
        prog = ConicProgram()
        pv = emit_pv(prog, unit, [0], KW_BASE, 1.0)
        sol = solve(prog, -1.0 * pv.p[0])
        assert sol.value(pv.p[0]) == pytest.approx(4.0, abs=1e-7)

    def test_zero_forecast_means_zero_output(self):
        unit = PvUnit(id="pv1", bus=2, capacity_kva=5.0,
                      forecast_kw=np.array([0.0]), power_factor_limit=1.0)
        prog = ConicProgram()
        pv = emit_pv(prog, unit, [0], KW_BASE, 1.0)
        sol = solve(prog, -1.0 * pv.p[0])
        assert abs(sol.value(pv.p[0])) <= 1e-9

    def test_inverter_cone_binds_under_reactive_duty(self):
        # with q pinned at 4 kVar on a 5 kVA inverter, p cannot exceed 3 kW
        unit = PvUnit(id="pv1", bus=2, capacity_kva=5.0,
                      forecast_kw=np.array([10.0]), power_factor_limit=1.0)
        prog = ConicProgram()
        pv = emit_pv(prog, unit, [0], KW_BASE, 1.0)
        prog.add_linear(1.0 * pv.q[0], "==", 4.0, tag="pinq")
        sol = solve(prog, -1.0 * pv.p[0])
        assert sol.value(pv.p[0]) == pytest.approx(3.0, abs=1e-6)

    def test_per_unit_conversion(self):
        unit = PvUnit(id="pv1", bus=2, capacity_kva=5.0,
                      forecast_kw=np.array([6.0]), power_factor_limit=0.8)
        base = PerUnitBase(power_mva=1.0, voltage_kv=12.66)
        prog = ConicProgram()
        pv = emit_pv(prog, unit, [0], base, 1.0)
        sol = solve(prog, -1.0 * pv.p[0])
        assert sol.value(pv.p[0]) == pytest.approx(0.004, abs=1e-9)


class TestDgEmission:
    def make(self, **overrides):
        params = dict(id="dg1", bus=3, p_min_kw=0.0, p_max_kw=100.0,
                      ramp_up_kw_per_h=30.0, ramp_down_kw_per_h=30.0,
                      cost_usd_per_kwh=0.3, initial_output_kw=50.0)
        params.update(overrides)
        return DgUnit(**params)

    def test_first_interval_ramps_from_initial_output(self):
        prog = ConicProgram()
        dg = emit_dg(prog, self.make(), [0], KW_BASE, 1.0)
        sol = solve(prog, -1.0 * dg.p[0])
        assert sol.value(dg.p[0]) == pytest.approx(80.0, abs=1e-6)  # 50 + 30

    def test_first_interval_ramp_down_floor(self):
        prog = ConicProgram()
        dg = emit_dg(prog, self.make(), [0], KW_BASE, 1.0)
        sol = solve(prog, 1.0 * dg.p[0])
        assert sol.value(dg.p[0]) == pytest.approx(20.0, abs=1e-6)  # 50 - 30

    def test_chained_ramp_reaches_box_limit(self):
        prog = ConicProgram()
        dg = emit_dg(prog, self.make(), [0, 1], KW_BASE, 1.0)
        sol = solve(prog, -(dg.p[0] + dg.p[1]))
        assert sol.value(dg.p[0]) == pytest.approx(80.0, abs=1e-6)
        assert sol.value(dg.p[1]) == pytest.approx(100.0, abs=1e-6)  # 110 clipped at box

    def test_ramp_scales_with_interval_length(self):
        prog = ConicProgram()
        dg = emit_dg(prog, self.make(), [0], KW_BASE, 0.5)
        sol = solve(prog, -1.0 * dg.p[0])
        assert sol.value(dg.p[0]) == pytest.approx(65.0, abs=1e-6)  # 50 + 30*0.5

    def test_default_initial_output_is_minimum(self):
        prog = ConicProgram()
        dg = emit_dg(prog, self.make(initial_output_kw=None, p_min_kw=10.0),
                     [0], KW_BASE, 1.0)
        sol = solve(prog, -1.0 * dg.p[0])
        assert sol.value(dg.p[0]) == pytest.approx(40.0, abs=1e-6)  # 10 + 30


class TestStorageEmission:
    def make_bess(self, **overrides):
        params = dict(id="b1", bus=2, p_ch_max_kw=10.0, p_dch_max_kw=10.0,
                      eff_ch=0.9, eff_dch=0.9, energy_init_kwh=5.0,
                      capacity_kwh=20.0, soc_min_kwh=0.0, soc_max_kwh=20.0,
                      cost_usd_per_kwh=0.01)
        params.update(overrides)
        return StorageUnit(**params)

    def test_charging_efficiency_arithmetic(self):
        # 10 kW for one hour at 90% charge efficiency stores 9 kWh
        prog = ConicProgram()
        sv = emit_storage(prog, self.make_bess(), [0], KW_BASE, 1.0, mode="bess")
        # terminal condition is soc >= energy_init, so charging is feasible
        report = solve_mi(prog, -1.0 * sv.p_ch[0])
        sol = report.incumbent
        assert sol.value(sv.p_ch[0]) == pytest.approx(10.0, abs=1e-6)
        assert sol.value(sv.soc[0]) == pytest.approx(14.0, abs=1e-6)  # 5 + 9

    def test_exclusivity_blocks_simultaneous_cycling(self):
        # rewarding both directions tempts simultaneous charge+discharge;
        # the indicator exclusivity limits each interval to one direction
        prog = ConicProgram()
        sv = emit_storage(
            prog, self.make_bess(eff_ch=1.0, eff_dch=1.0, energy_init_kwh=10.0),
            [0, 1], KW_BASE, 1.0, mode="bess",
        )
        objective = -(sv.p_ch[0] + sv.p_dch[0] + sv.p_ch[1] + sv.p_dch[1])
        report = solve_mi(prog, objective)
        sol = report.incumbent
        assert sol.objective_value == pytest.approx(-20.0, abs=1e-6)
        for t in (0, 1):
            ch = sol.value(sv.p_ch[t])
            dch = sol.value(sv.p_dch[t])
            assert min(ch, dch) <= 1e-7
            assert sol.value(sv.x_ch[t]) * sol.value(sv.x_dch[t]) <= 1e-9

    def test_branch_and_bound_matches_enumeration(self):
        prog = ConicProgram()
        sv = emit_storage(
            prog, self.make_bess(eff_ch=1.0, eff_dch=1.0, energy_init_kwh=10.0),
            [0, 1], KW_BASE, 1.0, mode="bess",
        )
        objective = -(sv.p_ch[0] + sv.p_dch[0] + sv.p_ch[1] + sv.p_dch[1])
        prog.set_objective(objective)
        sealed = prog.seal()
        report = solve_mixed_integer(sealed, TOL)
        assert report.incumbent.objective_value == pytest.approx(
            enumerate_best(sealed), abs=1e-6
        )

    def test_terminal_state_blocks_free_draining(self):
        # discharging pays, but the final state of charge may not drop below
        # the initial energy, so every discharged kWh must be recharged
        prog = ConicProgram()
        sv = emit_storage(
            prog,
            self.make_bess(eff_ch=1.0, eff_dch=1.0, energy_init_kwh=10.0,
                           p_ch_max_kw=10.0, p_dch_max_kw=5.0),
            [0, 1], KW_BASE, 1.0, mode="bess",
        )
        report = solve_mi(prog, -(sv.p_dch[0] + sv.p_dch[1]))
        sol = report.incumbent
        total_discharge = sol.value(sv.p_dch[0]) + sol.value(sv.p_dch[1])
        assert total_discharge == pytest.approx(5.0, abs=1e-6)
        assert sol.value(sv.soc[1]) >= 10.0 - 1e-7

    def test_soc_replay_matches_solver_trajectory(self):
        unit = self.make_bess()
        prog = ConicProgram()
        sv = emit_storage(prog, unit, [0, 1, 2], KW_BASE, 1.0, mode="bess")
        report = solve_mi(prog, -(sv.p_ch[0] + sv.p_dch[1] + sv.p_ch[2]))
        sol = report.incumbent
        p_ch = np.array([sol.value(sv.p_ch[t]) for t in range(3)])
        p_dch = np.array([sol.value(sv.p_dch[t]) for t in range(3)])
        replay = replay_soc(unit, p_ch, p_dch, KW_BASE, 1.0, [0, 1, 2])
        solved = np.array([sol.value(sv.soc[t]) for t in range(3)])
        assert np.max(np.abs(replay - solved)) <= 1e-7

    def test_ev_window_zeroing_and_trip_requirement(self):
        prog = ConicProgram()
        sv = emit_storage(prog, _ev(), range(6), KW_BASE, 1.0, mode="ev")
        assert sv.window == (2, 3, 4)
        report = solve_mi(prog, sum(sv.p_ch[t] for t in range(6)))
        sol = report.incumbent
        for t in (0, 1, 5):
            assert abs(sol.value(sv.p_ch[t])) <= 1e-9
            assert abs(sol.value(sv.p_dch[t])) <= 1e-9
            assert t not in sv.soc
        # cheapest plan charges exactly the trip shortfall: 12 - 5 = 7 kWh
        charged = sum(sol.value(sv.p_ch[t]) for t in sv.window)
        assert charged == pytest.approx(7.0, abs=1e-6)
        assert sol.value(sv.soc[4]) >= 12.0 - 1e-7

    def test_ev_unreachable_trip_raises_before_solving(self):
        ev = _ev(p_ch_max_kw=2.0, soc_init_kwh=0.0, trip_energy_kwh=10.0)
        with pytest.raises(InfeasibleWindowError, match="unreachable"):
            emit_storage(ConicProgram(), ev, range(6), KW_BASE, 1.0, mode="ev")

    def test_ev_window_outside_horizon_raises(self):
        with pytest.raises(InfeasibleWindowError, match="horizon"):
            emit_storage(ConicProgram(), _ev(departure=9), range(6),
                         KW_BASE, 1.0, mode="ev")

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            emit_storage(ConicProgram(), self.make_bess(), [0], KW_BASE, 1.0,
                         mode="flywheel")


class TestFlexLoad:
    def make(self, bound=3.0, horizon=2):
        return FlexLoad(id="f1", bus=2, p_max_kw=np.full(horizon, bound),
                        cost_usd_per_kwh=1.0)

    def test_split_charges_absolute_deviation(self):
        # a reward for load reduction drives p to -3; the split must report
        # the deviation magnitude on the negative part only
        prog = ConicProgram()
        fv = emit_flexload(prog, self.make(), [0], KW_BASE, 1.0)
        sol = solve(prog, (fv.p_pos[0] + fv.p_neg[0]) + 10.0 * fv.p[0])
        assert sol.value(fv.p[0]) == pytest.approx(-3.0, abs=1e-6)
        assert sol.value(fv.p_neg[0]) == pytest.approx(3.0, abs=1e-6)
        assert sol.value(fv.p_pos[0]) <= 1e-7

    def test_split_parts_never_overlap_under_positive_cost(self):
        prog = ConicProgram()
        fv = emit_flexload(prog, self.make(), [0, 1], KW_BASE, 1.0)
        prog.add_linear(1.0 * fv.p[0], "==", 1.5, tag="pin0")
        prog.add_linear(1.0 * fv.p[1], "==", -0.5, tag="pin1")
        cost = sum(fv.p_pos[t] + fv.p_neg[t] for t in (0, 1))
        sol = solve(prog, cost)
        assert sol.objective_value == pytest.approx(2.0, abs=1e-6)
        for t in (0, 1):
            overlap = min(sol.value(fv.p_pos[t]), sol.value(fv.p_neg[t]))
            assert overlap <= 1e-7

    def test_energy_floor_forces_net_shift(self):
        case = _case(horizon=2)
        # bus 2 fixed load is 0.001 p.u. per interval (2 kWh short of a 4 kWh floor)
        floor_case = NetworkCase(
            buses=(case.buses[0],
                   BusSpec(id=2, kind="load", v_min=0.9, v_max=1.1,
                           fixed_load=np.full(2, 1.0), load_power_factor=0.95,
                           min_energy=3.0),
                   case.buses[2]),
            lines=case.lines, base=case.base, horizon=2, dt=1.0, pcc_buses=(1,),
        )
        prog = ConicProgram()
        fv = emit_flexload(prog, self.make(), [0, 1], KW_BASE, 1.0)
        emit_energy_floor(prog, floor_case, 2, [fv], [0, 1])
        cost = sum(fv.p_pos[t] + fv.p_neg[t] for t in (0, 1))
        sol = solve(prog, cost)
        # fixed energy 2.0 p.u.h, floor 3.0 -> flexible load must add 1.0 net
        net = sol.value(fv.p[0]) + sol.value(fv.p[1])
        assert net == pytest.approx(1.0, abs=1e-6)

    def test_energy_floor_unsatisfiable_raises(self):
        case = _case(horizon=2)
        hungry = NetworkCase(
            buses=(case.buses[0],
                   BusSpec(id=2, kind="load", v_min=0.9, v_max=1.1,
                           fixed_load=np.full(2, 1.0), load_power_factor=0.95,
                           min_energy=100.0),
                   case.buses[2]),
            lines=case.lines, base=case.base, horizon=2, dt=1.0, pcc_buses=(1,),
        )
        prog = ConicProgram()
        fv = emit_flexload(prog, self.make(), [0, 1], KW_BASE, 1.0)
        with pytest.raises(DerParameterError, match="min_energy"):
            emit_energy_floor(prog, hungry, 2, [fv], [0, 1])

    def test_zero_floor_emits_nothing(self):
        case = _case(horizon=2)
        prog = ConicProgram()
        fv = emit_flexload(prog, self.make(), [0, 1], KW_BASE, 1.0)
        emit_energy_floor(prog, case, 2, [fv], [0, 1])
        assert not any(c.tag.startswith("energy_floor") for c in prog.constraints)


class TestFlexEnvelopes:
    def ev_portfolio(self):
        return DerPortfolio(ev=(_ev(p_ch_max_kw=7.0),))

    def ev_stage1(self, p_ch=3.0, soc_mid=10.0):
        horizon = 6
        values = {k: np.zeros(horizon) for k in ("p_ch", "p_dch", "x_ch", "x_dch", "soc")}
        values["p_ch"][3] = p_ch
        values["x_ch"][3] = 1.0
        values["soc"][2] = 5.0
        values["soc"][3] = soc_mid
        values["soc"][4] = soc_mid
        return {"ev1": values}

    def test_ev_charging_headroom_caps_downward(self):
        # charging 3 kW of a 7 kW charger leaves 4 kW of extra absorption
        prog = ConicProgram()
        envs = emit_flex_envelopes(prog, self.ev_portfolio(), self.ev_stage1(),
                                   range(6), KW_BASE, 1.0)
        env = envs[0]
        assert env.kind == "ev"
        assert env.df_max[3] == pytest.approx(4.0)
        assert env.uf_max[3] == pytest.approx(3.0)  # undo the charge itself

    def test_full_battery_has_no_absorption(self):
        stage1 = self.ev_stage1(soc_mid=20.0)  # at the soc ceiling
        prog = ConicProgram()
        envs = emit_flex_envelopes(prog, self.ev_portfolio(), stage1,
                                   range(6), KW_BASE, 1.0)
        assert envs[0].df_max[3] == pytest.approx(0.0)

    def test_outside_window_envelope_is_zero(self):
        prog = ConicProgram()
        envs = emit_flex_envelopes(prog, self.ev_portfolio(), self.ev_stage1(),
                                   range(6), KW_BASE, 1.0)
        env = envs[0]
        for t in (0, 1, 5):
            assert env.uf_max[t] == 0.0 and env.df_max[t] == 0.0
            assert env.y_uf[t].upper == 0.0 and env.y_df[t].upper == 0.0

    def test_dg_at_ceiling_has_no_upward_room(self):
        dg = DgUnit(id="dg1", bus=3, p_min_kw=0.0, p_max_kw=100.0,
                    ramp_up_kw_per_h=30.0, ramp_down_kw_per_h=30.0,
                    cost_usd_per_kwh=0.3)
        stage1 = {"dg1": {"p": np.array([100.0, 40.0])}}
        prog = ConicProgram()
        envs = emit_flex_envelopes(prog, DerPortfolio(dg=(dg,)), stage1,
                                   [0, 1], KW_BASE, 1.0)
        env = envs[0]
        assert env.uf_max[0] == pytest.approx(0.0)
        assert env.uf_max[1] == pytest.approx(30.0)  # ramp cap, not box cap
        assert env.df_max[1] == pytest.approx(30.0)

    def test_flexload_upward_only_undoes_positive_shift(self):
        fl = FlexLoad(id="f1", bus=2, p_max_kw=np.full(2, 5.0), cost_usd_per_kwh=1.0)
        stage1 = {"f1": {"p_fl": np.array([2.0, -1.0])}}
        prog = ConicProgram()
        envs = emit_flex_envelopes(prog, DerPortfolio(flex=(fl,)), stage1,
                                   [0, 1], KW_BASE, 1.0)
        env = envs[0]
        assert env.uf_max[0] == pytest.approx(2.0)
        assert env.df_max[0] == pytest.approx(3.0)
        # a day-ahead reduction leaves nothing to undo upward
        assert env.uf_max[1] == pytest.approx(0.0)
        assert env.df_max[1] == pytest.approx(6.0)

    def test_negative_shift_forces_zero_upward_at_optimum(self):
        fl = FlexLoad(id="f1", bus=2, p_max_kw=np.full(1, 5.0), cost_usd_per_kwh=1.0)
        stage1 = {"f1": {"p_fl": np.array([-1.0])}}
        prog = ConicProgram()
        envs = emit_flex_envelopes(prog, DerPortfolio(flex=(fl,)), stage1,
                                   [0], KW_BASE, 1.0)
        env = envs[0]
        report = solve_mi(prog, -1.0 * env.uf[0])
        assert abs(report.incumbent.value(env.uf[0])) <= 1e-8

    def test_pv_is_downward_only(self):
        pv = PvUnit(id="pv1", bus=2, capacity_kva=5.0,
                    forecast_kw=np.array([4.0, 0.0]), power_factor_limit=1.0)
        stage1 = {"pv1": {"p": np.array([3.5, 0.0])}}
        prog = ConicProgram()
        envs = emit_flex_envelopes(prog, DerPortfolio(pv=(pv,)), stage1,
                                   [0, 1], KW_BASE, 1.0)
        env = envs[0]
        assert env.uf == {} and env.y_uf == {}
        assert env.df_max[0] == pytest.approx(3.5)
        assert env.df_max[1] == pytest.approx(0.0)

    def test_direction_exclusivity_at_optimum(self):
        dg = DgUnit(id="dg1", bus=3, p_min_kw=0.0, p_max_kw=100.0,
                    ramp_up_kw_per_h=50.0, ramp_down_kw_per_h=50.0,
                    cost_usd_per_kwh=0.3)
        stage1 = {"dg1": {"p": np.array([40.0])}}
        prog = ConicProgram()
        envs = emit_flex_envelopes(prog, DerPortfolio(dg=(dg,)), stage1,
                                   [0], KW_BASE, 1.0)
        env = envs[0]
        report = solve_mi(prog, -(env.uf[0] + env.df[0]))
        sol = report.incumbent
        y_sum = sol.value(env.y_uf[0]) + sol.value(env.y_df[0])
        assert y_sum <= 1.0 + 1e-9
        assert min(sol.value(env.uf[0]), sol.value(env.df[0])) <= 1e-7
        # best single direction: uf capped at min(60, 50) = 50
        assert sol.objective_value == pytest.approx(-50.0, abs=1e-6)

    def test_replay_accepts_optimum_and_flags_violation(self):
        dg = DgUnit(id="dg1", bus=3, p_min_kw=0.0, p_max_kw=100.0,
                    ramp_up_kw_per_h=50.0, ramp_down_kw_per_h=50.0,
                    cost_usd_per_kwh=0.3)
        stage1 = {"dg1": {"p": np.array([40.0])}}
        prog = ConicProgram()
        envs = emit_flex_envelopes(prog, DerPortfolio(dg=(dg,)), stage1,
                                   [0], KW_BASE, 1.0)
        report = solve_mi(prog, -(envs[0].uf[0]))
        sol = report.incumbent
        assert replay_flex_bounds(envs, sol.value) <= 1e-7
        bad = dict((ref.id, sol.primal[ref.id]) for ref in prog.variables)
        bad[envs[0].uf[0].id] = 60.0  # beyond the 50 kW ramp cap
        assert replay_flex_bounds(envs, lambda ref: bad[ref.id]) >= 9.0

    def test_missing_stage1_series_names_the_unit(self):
        pv = PvUnit(id="pv1", bus=2, capacity_kva=5.0,
                    forecast_kw=np.array([4.0]), power_factor_limit=1.0)
        with pytest.raises(KeyError, match="pv1"):
            emit_flex_envelopes(ConicProgram(), DerPortfolio(pv=(pv,)), {},
                                [0], KW_BASE, 1.0)
