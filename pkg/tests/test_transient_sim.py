import math

import numpy as np
import pytest

from gridscale.grid_model import Branch, load_case
from gridscale.scenario_engine import FaultDescriptor, FaultType, ScenarioConfig, apply_scenario, generate_scenarios
from gridscale.steady_state import solve_power_flow
from gridscale.transient_sim import (OMEGA_S, DynamicParams, fault_signature_separability,
                                     simulate_fault)

from toys import smib

H_SMIB, XD_SMIB, X_LINE = 5.0, 0.3, 0.2


def smib_params(**kw):
    # machine 0 is the stiff source: huge inertia and tiny reactance
    return DynamicParams(D=0.0, overrides={0: {"H": 1e7, "xd": 1e-5, "D": 0.0},
                                           1: {"H": H_SMIB, "xd": XD_SMIB, "D": 0.0}}, **kw)


def equal_area_cct(case, sol):
    """Critical clearing time for a bolted fault at the machine terminal, from the equal-area criterion."""
    V = sol.voltage
    S = complex(sol.gen_p[1], sol.gen_q[1]) / case.base_mva
    E = V[1] + 1j * XD_SMIB * np.conj(S / V[1])
    pmax = abs(E) * abs(V[0]) / (XD_SMIB + X_LINE)
    pm = S.real
    d0 = math.asin(pm / pmax)
    dmax = math.pi - d0
    dc = math.acos((pm * (dmax - d0) + pmax * math.cos(dmax)) / pmax)
    return math.sqrt(4 * H_SMIB * (dc - d0) / (OMEGA_S * pm)), pm, pmax


@pytest.fixture(scope="module")
def ieee14():
    c = load_case("case14")
    return c, solve_power_flow(c)


def test_prefault_matches_steady_state(ieee14):
    c, sol = ieee14
    tr = simulate_fault(c, sol, FaultDescriptor(FaultType.THREE_PHASE_GROUND, "bus", 4, 0.1, 0.2))
    pre = tr.times < 0.1 - 1e-12
    assert np.abs(tr.v_mag[pre] - sol.v_mag).max() < 1e-6


def test_no_fault_is_flat(ieee14):
    c, sol = ieee14
    flat = simulate_fault(c, sol, None, DynamicParams(T=1.0))
    assert np.abs(flat.v_mag - sol.v_mag).max() < 1e-6 and flat.stable
    # tripping a branch that is already out of service changes nothing
    brs = list(c.branches)
    brs[6] = Branch(**{**brs[6].__dict__, "status": False})
    c2 = c.replace(branches=tuple(brs))
    sol2 = solve_power_flow(c2)
    tr = simulate_fault(c2, sol2, FaultDescriptor(FaultType.BRANCH_TRIP, "branch", 6, 0.1, 0.2), DynamicParams(T=1.0))
    assert np.abs(tr.v_mag - sol2.v_mag).max() < 1e-6


def test_vanishing_disturbance_recovers(ieee14):
    c, sol = ieee14
    tr = simulate_fault(c, sol, FaultDescriptor(FaultType.SINGLE_LINE_GROUND, "bus", 14, 0.1, 0.105))
    assert np.abs(tr.v_mag[-1] - sol.v_mag).max() < 1e-3


def test_smib_clearing_brackets_equal_area():
    c = smib()
    sol = solve_power_flow(c)
    tc, _, _ = equal_area_cct(c, sol)
    p = smib_params(T=2.0)

    def stable(t):
        return simulate_fault(c, sol, FaultDescriptor(FaultType.THREE_PHASE_GROUND, "bus", 2, 0.1, 0.1 + t), p).stable

    assert stable(0.95 * tc) and not stable(1.05 * tc)


def test_smib_energy_conserved_without_damping():
    c = smib()
    sol = solve_power_flow(c)
    _, pm, pmax = equal_area_cct(c, sol)
    tr = simulate_fault(c, sol, FaultDescriptor(FaultType.THREE_PHASE_GROUND, "bus", 2, 0.1, 0.2),
                        smib_params(T=3.0, dt=0.001))
    post = tr.times >= 0.2 + 1e-9
    d = tr.rotor_angles[:, 1] - tr.rotor_angles[:, 0]
    w = tr.rotor_speeds[:, 1] - tr.rotor_speeds[:, 0]
    ke = H_SMIB * OMEGA_S * w ** 2
    energy = ke - pm * d - pmax * np.cos(d)
    assert np.ptp(energy[post]) < 1e-3 * ke[post].max()


def test_dt_halving(ieee14):
    c, sol = ieee14
    f = FaultDescriptor(FaultType.THREE_PHASE_GROUND, "bus", 4, 0.1, 0.2)
    a = simulate_fault(c, sol, f, DynamicParams(dt=0.005))
    b = simulate_fault(c, sol, f, DynamicParams(dt=0.0025))
    rel = np.abs(a.rotor_angles[-1] - b.rotor_angles[-1]).max() / np.abs(b.rotor_angles[-1]).max()
    assert rel < 0.01


def test_deterministic(ieee14):
    c, sol = ieee14
    f = FaultDescriptor(FaultType.LINE_TO_LINE, "bus", 9, 0.1, 0.2)
    a, b = simulate_fault(c, sol, f, DynamicParams(T=1.0)), simulate_fault(c, sol, f, DynamicParams(T=1.0))
    assert np.array_equal(a.v_mag, b.v_mag)


def test_fault_depth_ordering(ieee14):
    c, sol = ieee14
    dips = []
    for ft in (FaultType.THREE_PHASE_GROUND, FaultType.DOUBLE_LINE_GROUND, FaultType.LINE_TO_LINE,
               FaultType.SINGLE_LINE_GROUND):
        tr = simulate_fault(c, sol, FaultDescriptor(ft, "bus", 5, 0.1, 0.2), DynamicParams(T=0.5))
        during = (tr.times >= 0.1) & (tr.times < 0.2)
        dips.append(tr.v_mag[during, c.bus_index[5]].min())
    assert dips == sorted(dips)


def test_invalid_params():
    with pytest.raises(ValueError):
        DynamicParams(dt=0.02)
    with pytest.raises(ValueError):
        DynamicParams(H=0)
    c = smib()
    with pytest.raises(ValueError):
        simulate_fault(c, solve_power_flow(c), FaultDescriptor(FaultType.THREE_PHASE_GROUND, "bus", 2, 0.1, 0.2),
                       DynamicParams(T=0.15))


def test_separability_ieee14():
    c = load_case("case14")
    traces = []
    for s in generate_scenarios(c, ScenarioConfig(master_seed=1, timestamp_stride=37), 3):
        a = apply_scenario(c, s)
        sol = solve_power_flow(a)
        for ft in FaultType:
            locs = [("branch", k) for k in (2, 9, 15)] if ft is FaultType.BRANCH_TRIP else \
                [("bus", b) for b in (4, 9, 13)]
            for el, loc in locs:
                traces.append(simulate_fault(a, sol, FaultDescriptor(ft, el, loc, 0.1, 0.2)).sampled(10))
    rep = fault_signature_separability(traces)
    assert rep.accuracy > 0.9 and not rep.flagged and rep.n_labels == 15


def test_separability_chance_and_refusal(ieee14):
    c, sol = ieee14
    tr = simulate_fault(c, sol, FaultDescriptor(FaultType.SINGLE_LINE_GROUND, "bus", 4, 0.1, 0.2), DynamicParams(T=0.5))
    rep = fault_signature_separability([tr] * 6, labels=["a", "b", "a", "b", "a", "b"])
    assert abs(rep.accuracy - rep.chance) < 1e-12 and rep.flagged
    with pytest.raises(ValueError):
        fault_signature_separability([tr])
