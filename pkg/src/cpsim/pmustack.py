"""PMU sampling, relative-wait concentrators and the SPDC load-reduction logic.

All classes here are host applications running inside a :class:`~cpsim.netsim.Network`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional, TextIO

from .desim import NS_PER_MS, SimTime, periodic_time
from .netsim import (CONTROL_COMMAND, PDC_AGGREGATE, PMU_MEASUREMENT, Network, NetTopology,
                     Packet, shortest_distances)

NOMINAL_SAMPLE = (1.0, 0.0, 50.0)

# (bus, tick, tau) -> (|V| pu, angle rad, f Hz)
PhasorSampler = Callable[[int, int, SimTime], tuple[float, float, float]]


def pmu_name(bus: int) -> str:
    return f"pmu{bus}"


def pdc_name(bus: int) -> str:
    return f"pdc{bus}"


def load_name(bus: int) -> str:
    return f"load{bus}"


SPDC = "spdc"


@dataclass
class AppParams:
    pmu_rate_hz: int = 30
    pdc_buses: tuple[int, ...] = (2, 6, 21, 27)
    spdc_bus: int = 6
    pdc_zones: Optional[dict[int, tuple[int, ...]]] = None
    pdc_max_wait: SimTime = 100 * NS_PER_MS
    spdc_max_wait: SimTime = 100 * NS_PER_MS
    thresholds_hz: tuple[float, ...] = (49.96, 49.92, 49.88)
    reduction_fraction: float = 0.02
    load_buses: tuple[int, ...] = ()
    control: bool = True


class AppLog:
    """Application events: ``host,event,meas_timestamp_ns,t_ns,detail``."""

    COLUMNS = ["host", "event", "meas_timestamp_ns", "t_ns", "detail"]

    def __init__(self, keep_pmu_tx: bool = True):
        self.rows: list[tuple[str, str, int, int, str]] = []
        self.keep_pmu_tx = keep_pmu_tx

    def add(self, host: str, event: str, meas_ts: SimTime, t: SimTime, detail: str = "") -> None:
        if event == "pmu_tx" and not self.keep_pmu_tx:
            return
        self.rows.append((host, event, meas_ts, t, detail))

    def write_csv(self, fh: TextIO) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(self.COLUMNS)
        w.writerows(self.rows)


class Concentrator:
    """Per-timestamp buffers flushed once: when every source reported or ``max_wait`` after the first arrival."""

    def __init__(self, expected: Iterable[str], max_wait: SimTime):
        self.expected = frozenset(expected)
        self.max_wait = max_wait
        self.buffers: dict[int, dict[str, Any]] = {}
        self.first_arrival: dict[int, SimTime] = {}
        self.flushed: dict[int, SimTime] = {}
        self.late: list[tuple[int, str, SimTime]] = []

    def ingest(self, tick: int, source: str, item: Any, t: SimTime) -> tuple[bool, Optional[dict[str, Any]]]:
        """Returns ``(opened, flushed_buffer)``; ``opened`` means a wait timer must be started."""
        if tick in self.flushed:
            self.late.append((tick, source, t))
            return False, None
        opened = tick not in self.buffers
        if opened:
            self.buffers[tick] = {}
            self.first_arrival[tick] = t
        buf = self.buffers[tick]
        buf[source] = item
        if self.expected <= buf.keys():
            return opened, self._flush(tick, t)
        return opened, None

    def timeout(self, tick: int, t: SimTime) -> Optional[dict[str, Any]]:
        if tick in self.flushed or tick not in self.buffers:
            return None
        return self._flush(tick, t)

    def deadline(self, tick: int) -> SimTime:
        return self.first_arrival[tick] + self.max_wait

    def _flush(self, tick: int, t: SimTime) -> dict[str, Any]:
        self.flushed[tick] = t
        return self.buffers.pop(tick)


class PmuHost:
    def __init__(self, bus: int, pdc: str, rate_hz: int, t_end: SimTime,
                 sampler: Optional[PhasorSampler] = None, log: Optional[AppLog] = None):
        self.name = pmu_name(bus)
        self.bus = bus
        self.pdc = pdc
        self.rate_hz = rate_hz
        self.t_end = t_end
        self.sampler = sampler
        self.log = log
        self.sent = 0

    def start(self, net: Network, first_tick: int = 0) -> None:
        tau = periodic_time(first_tick, self.rate_hz)
        if tau < self.t_end:
            net.set_timer(tau, self.name, first_tick)

    def tick(self, net: Network, k: int, tau: SimTime) -> Packet:
        sample = self.sampler(self.bus, k, tau) if self.sampler is not None else NOMINAL_SAMPLE
        pkt = net.new_packet(self.name, self.pdc, PMU_MEASUREMENT, tau, tick=k, payload=(self.bus, sample))
        net.send_packet(pkt, tau)
        self.sent += 1
        if self.log is not None:
            self.log.add(self.name, "pmu_tx", tau, tau)
        return pkt

    def on_timer(self, net: Network, k: int, t: SimTime) -> None:
        self.tick(net, k, t)
        nxt = periodic_time(k + 1, self.rate_hz)
        if nxt < self.t_end:
            net.set_timer(nxt, self.name, k + 1)

    def receive(self, net: Network, packet: Packet, t: SimTime) -> None:
        pass


class PdcHost:
    def __init__(self, bus: int, sources: Iterable[int], upstream: str, max_wait: SimTime,
                 log: Optional[AppLog] = None):
        self.name = pdc_name(bus)
        self.bus = bus
        self.upstream = upstream
        self.conc = Concentrator((pmu_name(b) for b in sources), max_wait)
        self.timers: dict[int, int] = {}
        self.taus: dict[int, SimTime] = {}
        self.log = log
        self.emitted: dict[int, SimTime] = {}

    def receive(self, net: Network, packet: Packet, t: SimTime) -> None:
        if packet.kind == PMU_MEASUREMENT:
            self.ingest(net, packet, t)

    def ingest(self, net: Network, pkt: Packet, t: SimTime) -> Optional[Packet]:
        opened, buf = self.conc.ingest(pkt.tick, pkt.src, pkt.payload, t)
        if opened:
            self.taus[pkt.tick] = pkt.meas_timestamp
        if buf is None:
            if opened:
                self.timers[pkt.tick] = net.set_timer(t + self.conc.max_wait, self.name, pkt.tick)
            elif pkt.tick in self.conc.flushed and self.log is not None:
                self.log.add(self.name, "late", pkt.meas_timestamp, t, pkt.src)
            return None
        timer = self.timers.pop(pkt.tick, None)
        if timer is not None:
            net.cancel_timer(timer)
        return self._emit(net, pkt.tick, buf, t, "complete")

    def timeout(self, net: Network, tick: int, t: SimTime) -> Optional[Packet]:
        self.timers.pop(tick, None)
        buf = self.conc.timeout(tick, t)
        if buf is None:
            return None
        return self._emit(net, tick, buf, t, "timeout")

    def on_timer(self, net: Network, key: Any, t: SimTime) -> None:
        self.timeout(net, key, t)

    def _emit(self, net: Network, tick: int, buf: dict[str, Any], t: SimTime, why: str) -> Packet:
        tau = self.taus.pop(tick)
        meas = dict(sorted(buf.values()))      # bus -> (|V|, angle, f)
        pkt = net.new_packet(self.name, self.upstream, PDC_AGGREGATE, tau, tick=tick, payload=meas)
        self.emitted[tick] = t
        if self.log is not None:
            self.log.add(self.name, "pdc_flush", tau, t, f"{why} {len(meas)}/{len(self.conc.expected)}")
        net.send_packet(pkt, t)
        return pkt


@dataclass(frozen=True)
class SpdcDecision:
    tick: int
    meas_timestamp: SimTime
    t_flush: SimTime
    buses: tuple[int, ...]
    avg_freq_hz: float
    fired: tuple[int, ...] = ()


class SpdcHost:
    """Aggregates PDC frames and issues load-reduction commands on threshold crossings.

    With ``forced`` set (tick -> threshold indices) the frequency test is replaced by a replay of
    those triggers, which is how a network-only rerun reproduces the command traffic of a power run.
    """

    def __init__(self, pdcs: Iterable[str], max_wait: SimTime, thresholds_hz: Iterable[float],
                 fraction: float, loads: Iterable[int], control: bool = True,
                 forced: Optional[dict[int, list[int]]] = None, log: Optional[AppLog] = None):
        self.name = SPDC
        self.conc = Concentrator(pdcs, max_wait)
        self.thresholds = tuple(thresholds_hz)
        self.fraction = fraction
        self.loads = tuple(loads)
        self.control = control
        self.forced = forced
        self.log = log
        self.next_threshold = 0
        self.timers: dict[int, int] = {}
        self.taus: dict[int, SimTime] = {}
        self.arrivals: dict[tuple[int, int], SimTime] = {}   # (bus, tick) -> aggregate arrival
        self.decisions: list[SpdcDecision] = []
        self.commands: list[tuple[int, int, SimTime]] = []   # (tick, threshold index, send time)
        self.on_decision: Optional[Callable[[SpdcDecision], None]] = None

    def receive(self, net: Network, packet: Packet, t: SimTime) -> None:
        if packet.kind == PDC_AGGREGATE:
            self.ingest(net, packet, t)

    def ingest(self, net: Network, pkt: Packet, t: SimTime) -> Optional[SpdcDecision]:
        opened, buf = self.conc.ingest(pkt.tick, pkt.src, pkt.payload, t)
        if opened:
            self.taus[pkt.tick] = pkt.meas_timestamp
        if pkt.tick not in self.conc.flushed or buf is not None:
            for bus in pkt.payload:
                self.arrivals[(bus, pkt.tick)] = t
        elif self.log is not None:
            self.log.add(self.name, "late", pkt.meas_timestamp, t, pkt.src)
        if buf is None:
            if opened:
                self.timers[pkt.tick] = net.set_timer(t + self.conc.max_wait, self.name, pkt.tick)
            return None
        timer = self.timers.pop(pkt.tick, None)
        if timer is not None:
            net.cancel_timer(timer)
        return self._decide(net, pkt.tick, buf, t)

    def on_timer(self, net: Network, key: Any, t: SimTime) -> None:
        self.timers.pop(key, None)
        buf = self.conc.timeout(key, t)
        if buf is not None:
            self._decide(net, key, buf, t)

    def _decide(self, net: Network, tick: int, buf: dict[str, Any], t: SimTime) -> SpdcDecision:
        tau = self.taus.pop(tick)
        meas: dict[int, tuple] = {}
        for frame in buf.values():
            meas.update(frame)
        buses = tuple(sorted(meas))
        avg = math.fsum(meas[b][2] for b in buses) / len(buses)
        fired: list[int] = []
        if self.control:
            if self.forced is not None:
                fired = [i for i in self.forced.get(tick, []) if i >= self.next_threshold]
            else:
                while self.next_threshold + len(fired) < len(self.thresholds) and \
                        avg < self.thresholds[self.next_threshold + len(fired)]:
                    fired.append(self.next_threshold + len(fired))
        dec = SpdcDecision(tick, tau, t, buses, avg, tuple(fired))
        self.decisions.append(dec)
        if self.log is not None:
            self.log.add(self.name, "spdc_decision", tau, t, f"n={len(buses)} f={avg:.6f}")
        for idx in fired:
            self.next_threshold = idx + 1
            for bus in self.loads:
                cmd = net.new_packet(self.name, load_name(bus), CONTROL_COMMAND, tau, tick=tick,
                                     payload=(idx, self.fraction))
                net.send_packet(cmd, t)
            self.commands.append((tick, idx, t))
            if self.log is not None:
                self.log.add(self.name, "cmd_tx", tau, t, f"threshold={idx}")
        if self.on_decision is not None:
            self.on_decision(dec)
        return dec


class LoadHost:
    def __init__(self, bus: int, log: Optional[AppLog] = None):
        self.name = load_name(bus)
        self.bus = bus
        self.log = log
        self.received: list[tuple[int, int, SimTime, SimTime]] = []   # (tick, idx, tau, arrival)
        self.on_command: Optional[Callable[["LoadHost", int, float, SimTime, SimTime], None]] = None

    def receive(self, net: Network, packet: Packet, t: SimTime) -> None:
        if packet.kind != CONTROL_COMMAND:
            return
        idx, fraction = packet.payload
        self.received.append((packet.tick, idx, packet.meas_timestamp, t))
        if self.log is not None:
            self.log.add(self.name, "cmd_rx", packet.meas_timestamp, t, f"threshold={idx}")
        if self.on_command is not None:
            self.on_command(self, idx, fraction, packet.meas_timestamp, t)

    def on_timer(self, net: Network, key: Any, t: SimTime) -> None:
        pass


def assign_zones(topology: NetTopology, pmu_buses: Iterable[int], pdc_buses: Iterable[int],
                 zones: Optional[dict[int, tuple[int, ...]]] = None) -> dict[int, int]:
    """Map each PMU bus to its PDC bus: explicit ``zones`` first, nearest by routing metric otherwise."""
    pdcs = sorted(pdc_buses)
    out: dict[int, int] = {}
    if zones:
        for pdc, members in zones.items():
            if pdc not in pdcs:
                raise ValueError(f"zone for unknown PDC bus {pdc}")
            for b in members:
                if b in out:
                    raise ValueError(f"bus {b} assigned to two PDC zones")
                out[b] = pdc
    dist = {p: shortest_distances(topology, p) for p in pdcs}
    for b in sorted(pmu_buses):
        if b not in out:
            out[b] = min(pdcs, key=lambda p: (dist[p].get(b, math.inf), p))
    return {b: out[b] for b in sorted(pmu_buses)}


@dataclass
class CommStack:
    net: Network
    params: AppParams
    zones: dict[int, int]
    pmus: dict[int, PmuHost]
    pdcs: dict[int, PdcHost]
    spdc: SpdcHost
    loads: dict[int, LoadHost]
    log: AppLog = field(default_factory=AppLog)

    def command_arrivals(self) -> list[tuple[int, int, int, SimTime, SimTime]]:
        """(load bus, tick, threshold index, tau, arrival) for every delivered command."""
        return sorted((b, k, i, tau, t) for b, h in self.loads.items() for k, i, tau, t in h.received)


def build_stack(net: Network, params: AppParams, t_end: SimTime,
                sampler: Optional[PhasorSampler] = None,
                forced: Optional[dict[int, list[int]]] = None,
                log: Optional[AppLog] = None) -> CommStack:
    """Attach PMUs at every bus, PDCs, the SPDC and load hosts, and start the PMU clocks."""
    log = log if log is not None else AppLog()
    topo = net.topology
    buses = sorted(topo.buses)
    zones = assign_zones(topo, buses, params.pdc_buses, params.pdc_zones)
    pmus = {}
    for b in buses:
        h = PmuHost(b, pdc_name(zones[b]), params.pmu_rate_hz, t_end, sampler, log)
        net.add_host(h, b)
        pmus[b] = h
    pdcs = {}
    for p in sorted(params.pdc_buses):
        h = PdcHost(p, [b for b in buses if zones[b] == p], SPDC, params.pdc_max_wait, log)
        net.add_host(h, p)
        pdcs[p] = h
    spdc = SpdcHost([pdc_name(p) for p in sorted(params.pdc_buses) if pdcs[p].conc.expected],
                    params.spdc_max_wait, params.thresholds_hz, params.reduction_fraction,
                    tuple(sorted(params.load_buses)), params.control, forced, log)
    net.add_host(spdc, params.spdc_bus)
    loads = {}
    for b in sorted(params.load_buses):
        h = LoadHost(b, log)
        net.add_host(h, b)
        loads[b] = h
    for h in pmus.values():
        h.start(net)
    return CommStack(net, params, zones, pmus, pdcs, spdc, loads, log)
