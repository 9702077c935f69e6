import math

import numpy as np
import pytest

from cpsim.desim import NS_PER_S
from cpsim.gridsim import (AlreadyTripped, GeneratorTrip, GridEvent, GridSimulator, LoadReduction,
                           Trajectory, UnknownTarget, init_steady_state, integrate, load_case,
                           read_case, solve_power_flow)
from cpsim.gridsim.case import build_ybus, default_case_path

from conftest import scenario

X_LINE, XD1, XD2, H1, H2 = 0.5, 0.3, 0.2, 4.0, 2.0


def two_machine(r=0.0):
    return load_case({
        "name": "two", "base_mva": 100.0, "base_kv": 345.0, "f_nominal_hz": 50.0,
        "buses": [[1, 3, 0.0, 0.0], [2, 2, 0.0, 0.0]],
        "generators": [[1, 0.0, 1.0, 100.0, H1, XD1, 0.0, 200.0], [2, 0.0, 1.0, 100.0, H2, XD2, 0.0, 200.0]],
        "branches": [[1, 2, r, X_LINE, 0.0, 0.0]],
        "governor": {"droop_pu": 0.05, "time_constant_s": 0.0},
        "frequency_filter_s": 0.0,
    })


def swing_energy(x):
    """Kinetic plus potential energy of the lossless two-machine system, by hand."""
    ws = 2 * math.pi * 50.0
    d1, d2, w1, w2 = x[0], x[1], x[2], x[3]
    return ws * (H1 * w1**2 + H2 * w2**2) - math.cos(d1 - d2) / (XD1 + X_LINE + XD2)


def test_two_machine_energy_and_momentum_conserved():
    model = two_machine()
    state = init_steady_state(model)
    state.x[1] += 0.4
    sim = GridSimulator(model, state)
    e0 = swing_energy(sim.state.x)
    p0 = H1 * sim.state.x[2] + H2 * sim.state.x[3]
    energies, speeds = [], []
    for k in range(1, 201):
        sim.advance_to(k * 10_000_000)
        energies.append(swing_energy(sim.state.x))
        speeds.append(abs(sim.state.x[3]))
        assert H1 * sim.state.x[2] + H2 * sim.state.x[3] == pytest.approx(p0, abs=1e-12)
    assert max(speeds) > 1e-3
    assert max(abs(e - e0) for e in energies) < 1e-7 * abs(e0)


def test_two_machine_resistance_dissipates():
    model = two_machine(r=0.05)
    state = init_steady_state(model)
    state.x[1] += 0.4
    sim = GridSimulator(model, state)
    e0 = swing_energy(sim.state.x)
    sim.advance_to(2 * NS_PER_S)
    # the lossless oracle notices the series resistance
    assert abs(swing_energy(sim.state.x) - e0) > 1e-4 * abs(e0)


def test_ieee39_power_flow():
    case = read_case(default_case_path())
    pf = solve_power_flow(case)
    assert pf.residual < 1e-9
    s_bus = pf.v * np.conj(build_ybus(case) @ pf.v) * case.base_mva
    # generation minus load balances the network injections
    gen = np.zeros(case.n_bus, dtype=complex)
    for g, s in zip(case.generators, pf.s_gen):
        gen[case.bus_index(g.bus)] += s * case.base_mva
    np.testing.assert_allclose(s_bus, gen - (case.pd_mw + 1j * case.qd_mvar), atol=1e-6)
    assert case.load_buses() == [3, 4, 7, 8, 12, 15, 16, 18, 20, 21, 23, 24, 25, 26, 27, 28, 29, 31, 39]


def test_steady_state_stays_put():
    model = load_case()
    tr = integrate(model, None, NS_PER_S)
    assert max(abs(f - 50.0) for f in tr.f_min) < 1e-9
    assert len(tr.sample_t) == 30


def test_trip_lowers_and_shedding_raises_frequency():
    model = scenario("c1").power_model
    base = integrate(model, None, 2 * NS_PER_S, [GridEvent(NS_PER_S // 2, GeneratorTrip(3))])
    shed = integrate(model, None, 2 * NS_PER_S, [GridEvent(NS_PER_S // 2, GeneratorTrip(3)),
                                                 GridEvent(NS_PER_S // 2, LoadReduction(39, 0.2))])
    assert base.f_coi[-1] < 50.0
    assert shed.f_coi[-1] > base.f_coi[-1]


def test_event_errors():
    sim = GridSimulator(load_case())
    sim.trip_generator(3)
    with pytest.raises(AlreadyTripped):
        sim.trip_generator(3)
    with pytest.raises(UnknownTarget):
        sim.trip_generator(11)
    with pytest.raises(UnknownTarget):
        sim.apply_load_reduction(1, 0.1)
    with pytest.raises(ValueError):
        sim.apply_load_reduction(39, 1.0)


def test_event_at_stop_time_is_pending():
    sim = GridSimulator(load_case())
    sim.schedule(GridEvent(NS_PER_S, GeneratorTrip(3)))
    sim.advance_to(NS_PER_S)
    assert sim.state.online.all()
    sim.advance_to(NS_PER_S + 1)
    assert not sim.state.online[2]


def test_checkpoint_resume_is_exact():
    model = scenario("c1").power_model
    events = [GridEvent(300_000_000, GeneratorTrip(3)), GridEvent(700_000_000, LoadReduction(39, 0.02))]

    def fresh():
        sim = GridSimulator(model, trajectory=Trajectory())
        for ev in events:
            sim.schedule(ev)
        return sim

    a = fresh()
    a.advance_to(500_000_000)
    cp = a.checkpoint()
    a.advance_to(NS_PER_S)
    b = GridSimulator.resume(model, cp, a.trajectory)
    b.advance_to(NS_PER_S)
    assert np.array_equal(a.state.x, b.state.x)
    assert a.trajectory.f_min == b.trajectory.f_min
    assert a.steps == b.steps


@pytest.mark.slow
def test_crossing_converges_under_step_halving():
    model = scenario("c1").power_model
    trip = [GridEvent(NS_PER_S, GeneratorTrip(3))]
    t1 = integrate(model, None, 5 * NS_PER_S, trip, step_ns=1_000_000).crossing_time(49.0)
    t2 = integrate(model, None, 5 * NS_PER_S, trip, step_ns=500_000).crossing_time(49.0)
    assert t1 is not None and t2 is not None
    assert abs(t1 - t2) < 1e-4
