import itertools

import pytest
from hypothesis import given, settings, strategies as st

from cpsim.desim import NS_PER_MS, periodic_time
from cpsim.netsim import CONTROL_COMMAND, PMU_MEASUREMENT, PDC_AGGREGATE, Network
from cpsim.pmustack import (SPDC, AppParams, Concentrator, LoadHost, PdcHost, SpdcHost, assign_zones,
                            build_stack, load_name, pdc_name, pmu_name)

from conftest import make_topology

WAIT = 100 * NS_PER_MS
OFFSETS_MS = (0, 40, 99, 101, 150, None)     # None: the source never reports


class Sink:
    def __init__(self, name):
        self.name = name
        self.got = []

    def receive(self, net, packet, t):
        self.got.append((packet, t))

    def on_timer(self, net, key, t):
        pass


def pdc_rig(n_sources):
    """PDC at bus 1 whose upstream sink sits on the same router (zero transfer time)."""
    net = Network(make_topology([(1, 2)]))
    pdc = PdcHost(1, range(10, 10 + n_sources), "up", WAIT)
    up = Sink("up")
    net.add_host(pdc, 1)
    net.add_host(up, 1)
    return net, pdc, up


def feed(net, pdc, tick, src_bus, t):
    def go(now):
        p = net.new_packet(pmu_name(src_bus), pdc.name, PMU_MEASUREMENT, periodic_time(tick, 30), tick=tick,
                           payload=(src_bus, (1.0, 0.0, 50.0)))
        pdc.ingest(net, p, now)
    net.call_at(t, go)


def oracle(arrivals):
    """(emission time, included sources) for one timestamp under relative-wait semantics."""
    got = sorted((t, s) for s, t in arrivals.items() if t is not None)
    deadline = got[0][0] + WAIT
    included = set()
    for t, s in got:
        if t > deadline:
            break
        included.add(s)
        if len(included) == len(arrivals):
            return t, included
    return deadline, included


def run_case(offsets):
    n = len(offsets)
    net, pdc, up = pdc_rig(n)
    base = 10 * NS_PER_MS
    arrivals = {}
    for i, off in enumerate(offsets):
        src = 10 + i
        arrivals[src] = None if off is None else base + off * NS_PER_MS
        if off is not None:
            feed(net, pdc, 0, src, arrivals[src])
    net.run_until(base + 500 * NS_PER_MS)
    return arrivals, up.got


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_pdc_brute_force_against_oracle(n):
    for offsets in itertools.product(OFFSETS_MS, repeat=n):
        if all(o is None for o in offsets):
            continue
        arrivals, got = run_case(offsets)
        assert len(got) == 1, offsets                       # exactly once
        pkt, t = got[0]
        t_exp, inc = oracle(arrivals)
        first = min(v for v in arrivals.values() if v is not None)
        assert t == t_exp, offsets
        assert t <= first + WAIT
        assert set(pkt.payload) == inc, offsets              # late arrivals never included
        assert pkt.kind == PDC_AGGREGATE and pkt.tick == 0


@settings(max_examples=80, deadline=None)
@given(st.lists(st.lists(st.one_of(st.none(), st.integers(0, 300)), min_size=3, max_size=3),
                min_size=1, max_size=5))
def test_pdc_interleaved_ticks(schedule):
    """Several timestamps in flight at once: each is emitted once, within its own window."""
    net, pdc, up = pdc_rig(3)
    expected = {}
    for tick, offs in enumerate(schedule):
        base = periodic_time(tick, 30)
        arr = {10 + i: (None if o is None else base + o * NS_PER_MS) for i, o in enumerate(offs)}
        for src, t in arr.items():
            if t is not None:
                feed(net, pdc, tick, src, t)
        if any(t is not None for t in arr.values()):
            expected[tick] = oracle(arr)
    net.run_until(10**10)
    got = {p.tick: (t, set(p.payload)) for p, t in up.got}
    assert len(got) == len(up.got)
    assert got == expected


def test_concentrator_late_and_timeout():
    c = Concentrator(["a", "b"], WAIT)
    assert c.ingest(0, "a", 1, 0) == (True, None)
    assert c.timeout(0, WAIT) == {"a": 1}
    assert c.timeout(0, WAIT) is None
    assert c.ingest(0, "b", 2, WAIT + 1) == (False, None)
    assert c.late == [(0, "b", WAIT + 1)]


def spdc_rig(thresholds=(49.96, 49.92, 49.88), forced=None, control=True, loads=(5, 3, 4)):
    net = Network(make_topology([(1, 2)]))
    spdc = SpdcHost(["pdcA"], WAIT, thresholds, 0.02, tuple(sorted(loads)), control, forced)
    net.add_host(spdc, 1)
    sinks = {}
    for b in loads:
        sinks[b] = LoadHost(b)
        net.add_host(sinks[b], 2)
    return net, spdc, sinks


def frame(net, spdc, tick, freqs, t):
    p = net.new_packet("pdcA", SPDC, PDC_AGGREGATE, periodic_time(tick, 30), tick=tick,
                       payload={b: (1.0, 0.0, f) for b, f in freqs.items()})
    return spdc.ingest(net, p, t)


def test_spdc_fires_each_threshold_once_in_order():
    net, spdc, sinks = spdc_rig()
    frame(net, spdc, 0, {1: 49.99, 2: 49.97}, 0)
    frame(net, spdc, 1, {1: 49.95, 2: 49.95}, 10)
    frame(net, spdc, 2, {1: 49.95, 2: 49.95}, 20)
    dec = frame(net, spdc, 3, {1: 49.80, 2: 49.90}, 30)
    assert dec.fired == (1, 2)
    assert dec.avg_freq_hz == pytest.approx(49.85)
    assert [(k, i) for k, i, _ in spdc.commands] == [(1, 0), (3, 1), (3, 2)]
    net.run_until(NS_PER_MS * 100)
    for host in sinks.values():
        assert [(k, i) for k, i, _, _ in host.received] == [(1, 0), (3, 1), (3, 2)]


def test_spdc_commands_leave_in_ascending_bus_order():
    net, spdc, _ = spdc_rig()
    frame(net, spdc, 0, {1: 49.0}, 0)
    net.run_until(NS_PER_MS * 200)
    cmds = sorted((r for r in net.trace.records if r.kind == CONTROL_COMMAND), key=lambda r: r.packet_id)
    assert [r.dst for r in cmds[:3]] == [load_name(b) for b in (3, 4, 5)]


def test_spdc_forced_replay_ignores_frequency():
    net, spdc, _ = spdc_rig(forced={2: [0, 1]})
    assert frame(net, spdc, 0, {1: 40.0}, 0).fired == ()
    assert frame(net, spdc, 2, {1: 50.0}, 5).fired == (0, 1)


def test_spdc_monitoring_only_never_commands():
    net, spdc, _ = spdc_rig(control=False)
    assert frame(net, spdc, 0, {1: 40.0}, 0).fired == ()
    assert spdc.commands == []


def test_assign_zones_explicit_then_nearest():
    topo = make_topology([(1, 2), (2, 3), (3, 4), (4, 5)], lengths={(1, 2): 10, (2, 3): 10, (3, 4): 10,
                                                                     (4, 5): 10})
    zones = assign_zones(topo, [1, 2, 3, 4, 5], [1, 5], {5: (2,)})
    assert zones == {1: 1, 2: 5, 3: 1, 4: 5, 5: 5}
    with pytest.raises(ValueError):
        assign_zones(topo, [1], [1], {7: (1,)})


def test_stack_offered_load_matches_pmu_count():
    """Line of 4 buses, PDC at 4: link 3->4 carries PMUs 1..3 at 30 Hz x 4000 bits."""
    topo = make_topology([(1, 2), (2, 3), (3, 4)], bandwidth_bps=1_600_000)
    net = Network(topo, record_links=[(3, 4)])
    params = AppParams(pdc_buses=(4,), spdc_bus=4, load_buses=(), control=False)
    stack = build_stack(net, params, t_end=10**9)
    net.run_until(2 * 10**9)
    bits = sum(b for _, _, b in net.dirs[(3, 4)].tx_log)
    assert bits == 3 * 30 * 4000
    assert stack.pdcs[4].conc.expected == {pmu_name(b) for b in (1, 2, 3, 4)}
    assert len(stack.spdc.decisions) == 30
    assert all(d.buses == (1, 2, 3, 4) for d in stack.spdc.decisions)


def test_host_names():
    assert (pmu_name(3), pdc_name(3), load_name(3)) == ("pmu3", "pdc3", "load3")
