"""Store-and-forward packet network laid over the grid's transmission lines.

One router per bus and one full-duplex link per branch. Each link direction
is a FIFO queue feeding a single transmitter; a packet occupies the
transmitter for its serialization time and then propagates along the line.
Hosts (PMUs, concentrators, load controllers) hang off routers through ideal
attachments. Routing is static shortest-path and is recomputed whenever a
link fails.
"""

from __future__ import annotations

import csv
import heapq
import io
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional, Protocol, TextIO, Union

from .desim import NS_PER_S, Event, EventQueue, SimStats, SimTime, check_time, round_half_up

LIGHT_SPEED_KM_S = 299792.458


class DisconnectedGraph(ValueError):
    pass


class MissingImpedance(ValueError):
    pass


class UnknownLink(KeyError):
    pass


class Unreachable(RuntimeError):
    def __init__(self, missing: dict[int, list[int]]):
        pairs = ", ".join(f"{src}->{dsts}" for src, dsts in sorted(missing.items()))
        super().__init__(f"unreachable destinations: {pairs}")
        self.missing = missing


@dataclass(frozen=True)
class NetParams:
    bandwidth_bps: int = 800_000
    packet_size_bytes: int = 500
    refractive_index: float = 1.5
    ohm_per_km: float = 0.3


def serialization_ns(size_bytes: int, bandwidth_bps: int) -> SimTime:
    """size*8/bandwidth seconds, rounded half-up to whole ns (exact integer arithmetic)."""
    num = size_bytes * 8 * NS_PER_S
    return (2 * num + bandwidth_bps) // (2 * bandwidth_bps)


def propagation_ns(length_km: float, refractive_index: float = 1.5) -> SimTime:
    return check_time(round_half_up(length_km * refractive_index / LIGHT_SPEED_KM_S * NS_PER_S))


@dataclass
class Link:
    a: int
    b: int
    bandwidth_bps: int
    length_km: float
    prop_delay: SimTime
    up: bool = True

    @property
    def key(self) -> tuple[int, int]:
        return (self.a, self.b)


def link_key(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


@dataclass
class NetTopology:
    buses: list[int]
    links: dict[tuple[int, int], Link]
    hosts: dict[str, int] = field(default_factory=dict)   # host name -> bus of its router
    packet_size_bytes: int = 500

    def link(self, a: int, b: int) -> Link:
        try:
            return self.links[link_key(a, b)]
        except KeyError:
            raise UnknownLink(f"no link between buses {a} and {b}") from None

    def neighbours(self, bus: int) -> list[int]:
        return self._adj()[bus]

    def _adj(self) -> dict[int, list[int]]:
        adj: dict[int, list[int]] = {b: [] for b in self.buses}
        for (a, b), ln in self.links.items():
            if ln.up:
                adj[a].append(b)
                adj[b].append(a)
        for v in adj.values():
            v.sort()
        return adj

    def attach(self, host: str, bus: int) -> None:
        if bus not in set(self.buses):
            raise KeyError(f"cannot attach {host}: no router at bus {bus}")
        self.hosts[host] = bus

    def metric(self, ln: Link) -> int:
        return ln.prop_delay + serialization_ns(self.packet_size_bytes, ln.bandwidth_bps)

    def is_connected(self) -> bool:
        adj = self._adj()
        seen = {self.buses[0]}
        todo = [self.buses[0]]
        while todo:
            for nb in adj[todo.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    todo.append(nb)
        return len(seen) == len(self.buses)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bus_a", "bus_b", "length_km", "prop_delay_ns", "bandwidth_bps"])
        for (a, b), ln in sorted(self.links.items()):
            w.writerow([a, b, f"{ln.length_km:.6f}", ln.prop_delay, ln.bandwidth_bps])
        return buf.getvalue()


def build_network(grid_case, net_params: NetParams = NetParams(),
                  hosts: Optional[dict[str, int]] = None) -> NetTopology:
    """One router per bus, one link per branch with a length derived from its series reactance.

    ``grid_case`` is a :class:`cpsim.gridsim.GridCase`; parallel branches share one link.
    """
    links: dict[tuple[int, int], Link] = {}
    for br in grid_case.branches:
        if br.x_pu is None:
            raise MissingImpedance(f"branch {br.from_bus}-{br.to_bus} has no reactance")
        key = link_key(br.from_bus, br.to_bus)
        if key in links:
            continue
        x_ohm = br.reactance_ohm(grid_case.base_kv, grid_case.base_mva)
        length = x_ohm / net_params.ohm_per_km
        links[key] = Link(key[0], key[1], net_params.bandwidth_bps, length,
                          propagation_ns(length, net_params.refractive_index))
    topo = NetTopology(list(grid_case.bus_ids), links, packet_size_bytes=net_params.packet_size_bytes)
    if not topo.is_connected():
        raise DisconnectedGraph("communication graph is not connected")
    for name, bus in (hosts or {}).items():
        topo.attach(name, bus)
    return topo


RoutingTable = dict[int, dict[int, int]]   # next_hop[node][destination]


def shortest_distances(topology: NetTopology, dst: int) -> dict[int, int]:
    adj = topology._adj()
    dist = {dst: 0}
    heap = [(0, dst)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v in adj[u]:
            nd = d + topology.metric(topology.link(u, v))
            if nd < dist.get(v, 1 << 62):
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


def compute_routes(topology: NetTopology, strict: bool = True) -> RoutingTable:
    """Shortest paths under prop_delay + one-packet serialization; ties go to the smallest neighbour id.

    With ``strict`` an :class:`Unreachable` is raised when some pair has no path;
    otherwise those entries are simply absent.
    """
    adj = topology._adj()
    table: RoutingTable = {u: {} for u in topology.buses}
    missing: dict[int, list[int]] = {}
    for dst in topology.buses:
        dist = shortest_distances(topology, dst)
        for u in topology.buses:
            if u == dst:
                continue
            if u not in dist:
                missing.setdefault(u, []).append(dst)
                continue
            table[u][dst] = min(v for v in adj[u]
                                if v in dist and topology.metric(topology.link(u, v)) + dist[v] == dist[u])
    if missing and strict:
        raise Unreachable(missing)
    return table


def route_path(table: RoutingTable, src: int, dst: int) -> list[int]:
    path = [src]
    while path[-1] != dst:
        nxt = table[path[-1]].get(dst)
        if nxt is None:
            raise Unreachable({src: [dst]})
        path.append(nxt)
        if len(path) > len(table) + 1:
            raise RuntimeError("routing loop")
    return path


PMU_MEASUREMENT = "PmuMeasurement"
PDC_AGGREGATE = "PdcAggregate"
CONTROL_COMMAND = "ControlCommand"


@dataclass(eq=False)
class Packet:
    id: int
    src: str
    dst: str
    kind: str
    meas_timestamp: SimTime
    sent_at: SimTime = 0
    size_bytes: int = 500
    tick: int = -1                     # PMU tick index carried symbolically alongside meas_timestamp
    payload: Any = None
    hops: Optional[list] = None        # (from, to, enqueued, tx_start, tx_end, arrived) when recording

    def __str__(self) -> str:
        return f"{self.kind}#{self.id} {self.src}->{self.dst} k={self.tick}"


@dataclass(frozen=True)
class TraceRecord:
    kind: str
    src: str
    dst: str
    meas_timestamp: SimTime
    sent: SimTime
    received: Optional[SimTime]
    dropped: bool = False
    reason: str = ""
    tick: int = -1
    packet_id: int = -1

    @property
    def delay(self) -> Optional[SimTime]:
        return None if self.received is None else self.received - self.sent


class DelayTrace:
    """Delivery and drop records for every packet of a run."""

    COLUMNS = ["kind", "src", "dst", "meas_timestamp_ns", "sent_ns", "received_ns", "dropped", "reason"]

    def __init__(self, records: Iterable[TraceRecord] = ()):
        self.records: list[TraceRecord] = list(records)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def filter(self, kind: Optional[str] = None, src: Optional[str] = None, dst: Optional[str] = None,
               t_from: Optional[SimTime] = None, t_to: Optional[SimTime] = None,
               delivered: Optional[bool] = None) -> "DelayTrace":
        out = []
        for r in self.records:
            if kind is not None and r.kind != kind:
                continue
            if src is not None and r.src != src:
                continue
            if dst is not None and r.dst != dst:
                continue
            if t_from is not None and r.meas_timestamp < t_from:
                continue
            if t_to is not None and r.meas_timestamp > t_to:
                continue
            if delivered is not None and r.dropped == delivered:
                continue
            out.append(r)
        return DelayTrace(out)

    def write_csv(self, fh: TextIO) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.records:
            w.writerow([r.kind, r.src, r.dst, r.meas_timestamp, r.sent,
                        "" if r.received is None else r.received, int(r.dropped), r.reason])

    @classmethod
    def read_csv(cls, fh: TextIO) -> "DelayTrace":
        out = []
        for row in csv.DictReader(fh):
            out.append(TraceRecord(row["kind"], row["src"], row["dst"], int(row["meas_timestamp_ns"]),
                                   int(row["sent_ns"]), int(row["received_ns"]) if row["received_ns"] else None,
                                   row["dropped"] == "1", row["reason"]))
        return cls(out)


class Host(Protocol):
    name: str

    def receive(self, net: "Network", packet: Packet, t: SimTime) -> None: ...

    def on_timer(self, net: "Network", key: Any, t: SimTime) -> None: ...


class _Direction:
    __slots__ = ("link", "src", "dst", "queue", "busy", "tx_event", "epoch", "bits", "tx_log")

    def __init__(self, link: Link, src: int, dst: int):
        self.link = link
        self.src = src
        self.dst = dst
        self.queue: deque = deque()
        self.busy: Optional[Packet] = None
        self.tx_event: Optional[int] = None
        self.epoch = 0
        self.bits = 0
        self.tx_log: Optional[list] = None   # (tx_start, tx_end) per packet when recording


class Network:
    """Runtime state of one network run, driven by its own :class:`EventQueue`."""

    def __init__(self, topology: NetTopology, queue: Optional[EventQueue] = None,
                 record_hops: bool = False, record_links: Iterable[tuple[int, int]] = ()):
        self.topology = topology
        self.queue = queue if queue is not None else EventQueue()
        self.routes = compute_routes(topology)
        self.hosts: dict[str, Host] = {}
        self.dirs: dict[tuple[int, int], _Direction] = {}
        for ln in topology.links.values():
            self.dirs[(ln.a, ln.b)] = _Direction(ln, ln.a, ln.b)
            self.dirs[(ln.b, ln.a)] = _Direction(ln, ln.b, ln.a)
        for key in record_links:
            self.dirs[key].tx_log = []
        self.record_hops = record_hops
        self.trace = DelayTrace()
        self._next_id = 0
        self.delivery_hook: Optional[Callable[[Packet, SimTime], None]] = None
        self._ser_cache: dict[tuple[int, int], int] = {}
        self._dispatch = {
            "arrive": self._on_arrive,
            "txend": self._on_txend,
            "timer": self._on_timer,
            "fail": self._on_fail,
            "call": self._on_call,
        }

    # -- hosts and packets -------------------------------------------------

    def add_host(self, host: Host, bus: Optional[int] = None) -> None:
        if bus is not None:
            self.topology.attach(host.name, bus)
        elif host.name not in self.topology.hosts:
            raise KeyError(f"host {host.name} is not attached to a router")
        self.hosts[host.name] = host

    def new_packet(self, src: str, dst: str, kind: str, meas_timestamp: SimTime, tick: int = -1,
                   payload: Any = None) -> Packet:
        self._next_id += 1
        return Packet(self._next_id - 1, src, dst, kind, meas_timestamp, tick=tick, payload=payload,
                      size_bytes=self.topology.packet_size_bytes,
                      hops=[] if self.record_hops else None)

    def send_packet(self, packet: Packet, t: SimTime) -> None:
        """Hand ``packet`` to the router of its source host at time ``t``."""
        packet.sent_at = t
        src_bus = self.topology.hosts[packet.src]
        if t == self.queue.clock:
            self._at_router(packet, src_bus, t)
        else:
            self.queue.schedule(t, "arrive", (packet, src_bus, None, 0))

    def set_timer(self, t: SimTime, host: str, key: Any) -> int:
        return self.queue.schedule(t, "timer", (host, key))

    def cancel_timer(self, event_id: int) -> bool:
        return self.queue.cancel(event_id)

    def call_at(self, t: SimTime, fn: Callable[[SimTime], None], label: str = "call") -> int:
        return self.queue.schedule(t, "call", (fn, label))

    def _ser(self, ln: Link, size: int) -> int:
        key = (size, ln.bandwidth_bps)
        v = self._ser_cache.get(key)
        if v is None:
            v = self._ser_cache[key] = serialization_ns(size, ln.bandwidth_bps)
        return v

    def _drop(self, p: Packet, reason: str) -> None:
        self.trace.records.append(TraceRecord(p.kind, p.src, p.dst, p.meas_timestamp, p.sent_at, None,
                                              True, reason, p.tick, p.id))

    def _at_router(self, p: Packet, bus: int, t: SimTime) -> None:
        dst_bus = self.topology.hosts[p.dst]
        if bus == dst_bus:
            self.trace.records.append(TraceRecord(p.kind, p.src, p.dst, p.meas_timestamp, p.sent_at, t,
                                                  False, "", p.tick, p.id))
            if self.delivery_hook is not None:
                self.delivery_hook(p, t)
            self.hosts[p.dst].receive(self, p, t)
            return
        nh = self.routes[bus].get(dst_bus)
        if nh is None:
            self._drop(p, "no_route")
            return
        d = self.dirs[(bus, nh)]
        if self.record_hops:
            p.hops.append([bus, nh, t, None, None, None])
        d.queue.append(p)
        if d.busy is None:
            self._start_tx(d, t)

    def _start_tx(self, d: _Direction, t: SimTime) -> None:
        p = d.queue.popleft()
        d.busy = p
        ser = self._ser(d.link, p.size_bytes)
        if p.hops is not None:
            p.hops[-1][3] = t
            p.hops[-1][4] = t + ser
        if d.tx_log is not None:
            d.tx_log.append((t, t + ser, p.size_bytes * 8))
        d.tx_event = self.queue.schedule(t + ser, "txend", d)

    # -- event handlers ----------------------------------------------------

    def handle(self, ev: Event) -> None:
        self._dispatch[ev.kind](ev.payload, ev.fire_at)

    def _on_arrive(self, payload, t: SimTime) -> None:
        p, bus, d, epoch = payload
        if d is not None:
            if not d.link.up or d.epoch != epoch:
                self._drop(p, "link_down")
                return
            if p.hops is not None:
                p.hops[-1][5] = t
        self._at_router(p, bus, t)

    def _on_txend(self, d: _Direction, t: SimTime) -> None:
        p = d.busy
        d.busy = None
        d.tx_event = None
        d.bits += p.size_bytes * 8
        self.queue.schedule(t + d.link.prop_delay, "arrive", (p, d.dst, d, d.epoch))
        if d.queue:
            self._start_tx(d, t)

    def _on_timer(self, payload, t: SimTime) -> None:
        host, key = payload
        self.hosts[host].on_timer(self, key, t)

    def _on_call(self, payload, t: SimTime) -> None:
        payload[0](t)

    def fail_link(self, bus_a: int, bus_b: int, t: SimTime) -> None:
        """Schedule a failure of the link between two buses at ``t``."""
        self.topology.link(bus_a, bus_b)
        self.queue.schedule(t, "fail", (bus_a, bus_b))

    def _on_fail(self, payload, t: SimTime) -> None:
        a, b = payload
        ln = self.topology.link(a, b)
        if not ln.up:
            return
        ln.up = False
        for d in (self.dirs[(ln.a, ln.b)], self.dirs[(ln.b, ln.a)]):
            d.epoch += 1
            if d.busy is not None:
                self.queue.cancel(d.tx_event)
                self._drop(d.busy, "link_down")
                d.busy = None
                d.tx_event = None
            while d.queue:
                self._drop(d.queue.popleft(), "link_down")
        self.routes = compute_routes(self.topology, strict=False)

    # -- running -----------------------------------------------------------

    def run_until(self, t_end: SimTime) -> SimStats:
        return self.queue.run_until(t_end, self.handle)

    def collect_delay_trace(self) -> DelayTrace:
        return self.trace
