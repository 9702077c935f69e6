"""Two ways of coupling the grid and its communication network.

Self-consistent simulation runs the two simulators one after the other. The network run yields
per-path delay models, the grid run consumes them and logs the command traffic it would emit,
the network is rerun with that traffic, and so on until the delay models stop changing.

Co-simulation runs both in lockstep, exchanging PMU samples and command deliveries at
synchronisation points; the network side may only create a sync point ``min_net_sync`` after
the current one, so deliveries can be perceived late by the grid.
"""

from __future__ import annotations

import bisect
import copy
import csv
import itertools
import json
import math
import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable, Optional, TextIO

from .config import ConfigError, ScenarioConfig
from .desim import NS_PER_MS, SimTime, periodic_time, round_half_up
from .gridsim import GeneratorTrip, GridCheckpoint, GridEvent, GridSimulator, LoadReduction, PowerModel, Trajectory
from .gridsim.case import GridCase, calibrated, default_case_path, read_case
from .netsim import CONTROL_COMMAND, DelayTrace, NetParams, Network, build_network
from .pmustack import SPDC, AppLog, AppParams, CommStack, build_stack, load_name, pmu_name

Path = tuple[str, str]


class UnknownPath(KeyError):
    pass


class UncoveredPath(KeyError):
    pass


class DisjointPaths(ValueError):
    pass


class ProbeDropped(RuntimeError):
    def __init__(self, loads: list[int]):
        super().__init__(f"probe commands never reached loads {loads}")
        self.loads = loads


class NotConverged(RuntimeError):
    def __init__(self, max_iter: int, norms_ms: list[float], report: Optional["RunReport"] = None):
        shown = ", ".join(f"{n:.6f}" for n in norms_ms)
        super().__init__(f"no fixed point after {max_iter} iterations (norms in ms: {shown}); "
                         "the coupling may be too strong for sequential simulation, try co-simulation")
        self.max_iter = max_iter
        self.norms_ms = norms_ms
        self.report = report


class ScenarioMismatch(ValueError):
    pass


# -- scenario ---------------------------------------------------------------------

@dataclass
class Scenario:
    """A validated config resolved against its grid case."""

    config: ScenarioConfig
    case: GridCase
    app: AppParams
    net_params: NetParams

    @classmethod
    def from_config(cls, cfg: ScenarioConfig) -> "Scenario":
        g, h, c = cfg.grid, cfg.hosts, cfg.control
        base = read_case(g.case_path or default_case_path())
        case = calibrated(base, inertia_scale=g.inertia_scale, droop_pu=g.droop_pu,
                          governor_tg_s=g.governor_tg_s, frequency_filter_s=g.frequency_filter_s,
                          inertia_h_s=g.inertia_h_s)
        buses = set(case.bus_ids)
        for path, ids in (("hosts.pdc_buses", h.pdc_buses), ("hosts.spdc_bus", (h.spdc_bus,)),
                          ("hosts.load_buses", h.load_buses or ())):
            bad = sorted(set(ids) - buses)
            if bad:
                raise ConfigError(path, f"unknown bus {bad[0]}")
        loads = tuple(sorted(h.load_buses)) if h.load_buses is not None else tuple(case.load_buses())
        unloaded = sorted(set(loads) - set(case.load_buses()))
        if unloaded:
            raise ConfigError("hosts.load_buses", f"bus {unloaded[0]} carries no load")
        if h.pdc_zones:
            bad = sorted({b for m in h.pdc_zones.values() for b in m} - buses)
            if bad:
                raise ConfigError("hosts.pdc_zones", f"unknown bus {bad[0]}")
        for trip in cfg.events.generator_trips:
            if not 1 <= trip.gen_id <= len(case.generators):
                raise ConfigError("events.generator_trips", f"unknown generator {trip.gen_id}")
        app = AppParams(pmu_rate_hz=h.pmu_rate_hz, pdc_buses=tuple(h.pdc_buses), spdc_bus=h.spdc_bus,
                        pdc_zones=h.pdc_zones, pdc_max_wait=h.pdc_max_wait, spdc_max_wait=h.spdc_max_wait,
                        thresholds_hz=tuple(c.thresholds_hz), reduction_fraction=c.reduction_fraction,
                        load_buses=loads, control=c.enabled)
        n = cfg.network
        net_params = NetParams(n.bandwidth_bps, n.packet_size_bytes, n.refractive_index, n.ohm_per_km)
        sc = cls(cfg, case, app, net_params)
        sc.topology()   # surfaces unknown links early
        for lf in cfg.events.link_failures:
            try:
                sc.topology().link(lf.bus_a, lf.bus_b)
            except KeyError:
                raise ConfigError("events.link_failures", f"no link between {lf.bus_a} and {lf.bus_b}") from None
        return sc

    @property
    def name(self) -> str:
        return self.config.name

    @property
    def t_end(self) -> SimTime:
        return self.config.run.t_end

    @property
    def control(self) -> bool:
        return self.config.control.enabled

    @property
    def command_paths(self) -> list[Path]:
        return [(SPDC, load_name(b)) for b in self.app.load_buses]

    @property
    def measurement_paths(self) -> list[Path]:
        return [(pmu_name(b), SPDC) for b in sorted(self.case.bus_ids)]

    @property
    def paths_of_interest(self) -> list[Path]:
        return self.command_paths if self.control else self.measurement_paths

    @cached_property
    def power_model(self) -> PowerModel:
        return PowerModel(self.case)

    def topology(self):
        return build_network(self.case, self.net_params)

    def grid_events(self) -> list[GridEvent]:
        return [GridEvent(t.at, GeneratorTrip(t.gen_id)) for t in self.config.events.generator_trips]

    def new_stack(self, forced: Optional[dict[int, list[int]]] = None, sampler=None) -> CommStack:
        net = Network(self.topology())
        stack = build_stack(net, self.app, self.t_end, sampler=sampler, forced=forced,
                            log=AppLog(keep_pmu_tx=False))
        for lf in self.config.events.link_failures:
            net.fail_link(lf.bus_a, lf.bus_b, lf.at)
        return stack


# -- delay models -----------------------------------------------------------------

@dataclass
class DelayModel:
    """pdf_i: per path and trigger timestamp, the empirical delay distribution (support points, ns)."""

    entries: dict[Path, dict[SimTime, list[SimTime]]] = field(default_factory=dict)
    iteration: int = 0
    # tick -> (SPDC decision time minus timestamp, buses in the decision)
    decisions: dict[int, tuple[SimTime, tuple[int, ...]]] = field(default_factory=dict)
    # called with a tick past the recorded range when the producing run can be extended
    extend: Optional[Callable[[int], None]] = field(default=None, repr=False, compare=False)

    COLUMNS = ["src", "dst", "trigger_timestamp_ns", "mean_delay_ns", "support_points"]

    def add(self, path: Path, tau: SimTime, delay: SimTime) -> None:
        self.entries.setdefault(path, {}).setdefault(tau, []).append(delay)
        self.__dict__.pop("_knots", None)

    def paths(self) -> set[Path]:
        return set(self.entries)

    def mean(self, path: Path, tau: SimTime) -> float:
        pts = self.entries[path][tau]
        return math.fsum(pts) / len(pts)

    def knots(self, path: Path) -> list[SimTime]:
        cache = self.__dict__.setdefault("_knots", {})
        if path not in cache:
            cache[path] = sorted(self.entries[path])
        return cache[path]

    def decision(self, tick: int) -> Optional[tuple[SimTime, tuple[int, ...]]]:
        """Decision record for ``tick``; ticks beyond the recorded range reuse the nearest one."""
        if self.extend is not None and tick not in self.decisions:
            self.extend(tick)
        if tick in self.decisions:
            return self.decisions[tick]
        if not self.decisions:
            return None
        ticks = self.__dict__.get("_dticks")
        if ticks is None or len(ticks) != len(self.decisions):
            ticks = self.__dict__["_dticks"] = sorted(self.decisions)
        i = bisect.bisect_right(ticks, tick)
        return self.decisions[ticks[max(i - 1, 0)]]

    def is_dirac(self) -> bool:
        return all(len(set(v)) == 1 for e in self.entries.values() for v in e.values())

    def write_csv(self, fh: TextIO, paths: Optional[list[Path]] = None) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for path in (paths if paths is not None else sorted(self.entries)):
            for tau in self.knots(path):
                pts = self.entries[path][tau]
                m = self.mean(path, tau)
                w.writerow([path[0], path[1], tau, int(m) if m == int(m) else f"{m:.3f}",
                            ";".join(str(p) for p in pts)])

    @classmethod
    def read_csv(cls, fh: TextIO, iteration: int = 0) -> "DelayModel":
        dm = cls(iteration=iteration)
        for row in csv.DictReader(fh):
            for p in row["support_points"].split(";"):
                dm.add((row["src"], row["dst"]), int(row["trigger_timestamp_ns"]), int(p))
        return dm


def interpolate_delay(model: DelayModel, path: Path, tau: SimTime) -> SimTime:
    """Exact at known timestamps, linear in between, clamped outside the known range."""
    if path not in model.entries or not model.entries[path]:
        raise UnknownPath(f"no delay entries for path {path[0]}->{path[1]}")
    knots = model.knots(path)
    i = bisect.bisect_left(knots, tau)
    if i < len(knots) and knots[i] == tau:
        return round_half_up(model.mean(path, tau))
    if i == 0:
        return round_half_up(model.mean(path, knots[0]))
    if i == len(knots):
        return round_half_up(model.mean(path, knots[-1]))
    t0, t1 = knots[i - 1], knots[i]
    m0, m1 = model.mean(path, t0), model.mean(path, t1)
    return round_half_up(m0 + (m1 - m0) * (tau - t0) / (t1 - t0))


def _interp_float(model: DelayModel, path: Path, tau: SimTime) -> float:
    knots = model.knots(path)
    i = bisect.bisect_left(knots, tau)
    if i < len(knots) and knots[i] == tau:
        return model.mean(path, tau)
    if i == 0:
        return model.mean(path, knots[0])
    if i == len(knots):
        return model.mean(path, knots[-1])
    t0, t1 = knots[i - 1], knots[i]
    m0, m1 = model.mean(path, t0), model.mean(path, t1)
    return m0 + (m1 - m0) * (tau - t0) / (t1 - t0)


def convergence_norm(d1: DelayModel, d2: DelayModel, paths: Optional[list[Path]] = None) -> float:
    """Largest |mean delay difference| in ms over ``paths`` and the union of both timestamp grids."""
    if paths is None:
        paths = sorted(d1.paths() & d2.paths())
        if not paths:
            raise DisjointPaths("the two delay models share no path")
    worst = 0.0
    for path in paths:
        if path not in d1.entries or path not in d2.entries:
            raise DisjointPaths(f"path {path[0]}->{path[1]} is missing from one model")
        for tau in sorted(set(d1.entries[path]) | set(d2.entries[path])):
            worst = max(worst, abs(_interp_float(d1, path, tau) - _interp_float(d2, path, tau)))
    return worst / NS_PER_MS


def extract_delay_model(stack: CommStack, iteration: int) -> DelayModel:
    dm = DelayModel(iteration=iteration)
    _DelayExtractor(stack).update(dm)
    return dm


class _DelayExtractor:
    """Adds to a delay model whatever a (still running) stack recorded since the previous call."""

    def __init__(self, stack: CommStack):
        self.stack = stack
        self.received = {bus: 0 for bus in stack.loads}
        self.arrivals = 0
        self.decisions = 0

    def update(self, dm: DelayModel) -> None:
        st = self.stack
        rate = st.params.pmu_rate_hz
        for bus, host in sorted(st.loads.items()):
            for tick, idx, tau, t in host.received[self.received[bus]:]:
                dm.add((SPDC, host.name), tau, t - tau)
            self.received[bus] = len(host.received)
        if len(st.spdc.arrivals) > self.arrivals:
            new = itertools.islice(st.spdc.arrivals.items(), self.arrivals, None)
            for (bus, tick), t in sorted(new):
                tau = periodic_time(tick, rate)
                dm.add((pmu_name(bus), SPDC), tau, t - tau)
            self.arrivals = len(st.spdc.arrivals)
        for d in st.spdc.decisions[self.decisions:]:
            dm.decisions[d.tick] = (d.t_flush - d.meas_timestamp, d.buses)
        self.decisions = len(st.spdc.decisions)
        dm.__dict__.pop("_knots", None)
        dm.__dict__.pop("_dticks", None)


# -- network side -----------------------------------------------------------------

class NetworkBase:
    """Monitoring-only network run shared by every network run of a scenario.

    Runs differ only once command traffic appears, so each one forks a copy of this run at the
    first timestamp that carries commands instead of replaying the common prefix.
    """

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self._reset()

    def _reset(self) -> None:
        self.stack = self.scenario.new_stack(forced={})
        self.t: SimTime = -1

    def fork_at(self, t: SimTime) -> CommStack:
        if t < self.t:
            self._reset()
        if t > self.t:
            self.stack.net.run_until(t)
            self.t = t
        return copy.deepcopy(self.stack, _shared_parts(self.stack))


def _shared_parts(stack: CommStack) -> dict[int, Any]:
    """Deepcopy memo that lets a fork share objects no run ever mutates (records, routing table)."""
    memo: dict[int, Any] = {id(stack.net.routes): stack.net.routes}
    for group in (stack.net.trace.records, stack.spdc.decisions, stack.log.rows):
        for obj in group:
            memo[id(obj)] = obj
    return memo


@dataclass
class AdditionalTraffic:
    send_time: SimTime
    src: str
    dst: str
    kind: str
    size_bytes: int
    threshold_index: int
    tick: int
    meas_timestamp: SimTime


class AdditionalTrafficLog(list):
    """Command traffic emitted by a power run, in emission order."""

    def forced_triggers(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for a in self:
            idx = out.setdefault(a.tick, [])
            if a.threshold_index not in idx:
                idx.append(a.threshold_index)
        return out

    def first_timestamp(self) -> Optional[SimTime]:
        return min((a.meas_timestamp for a in self), default=None)


class NetworkRun:
    """One network run, advanced only as far as its results are needed.

    The run is deterministic, so extending it later yields exactly what a single full run would.
    """

    STRIDE = 33_333_333        # one PMU period: probes stop soon after delivery

    def __init__(self, scenario: Scenario, stack: CommStack, iteration: int, forced: dict[int, list[int]]):
        self.scenario = scenario
        self.stack = stack
        self.iteration = iteration
        self.forced = forced
        self._views: list[DelayModel] = []

    @property
    def t(self) -> SimTime:
        return self.stack.net.queue.clock

    @property
    def finished(self) -> bool:
        return self.t >= self.scenario.t_end

    def advance(self, t: SimTime) -> None:
        t = min(t, self.scenario.t_end)
        if t > self.t:
            self.stack.net.run_until(t)
            if self._views:
                self._refresh()

    def finish(self) -> "NetworkRun":
        self.advance(self.scenario.t_end)
        return self

    def commands_delivered(self) -> bool:
        want = {(k, i) for k, idx in self.forced.items() for i in idx}
        for host in self.stack.loads.values():
            got = {(k, i) for k, i, _, _ in host.received}
            if not want <= got:
                return False
        return True

    def run_until_delivered(self) -> None:
        while not self.finished and not self.commands_delivered():
            self.advance(self.t + self.STRIDE)

    def _refresh(self) -> None:
        self._extractor.update(self._views[0])
        for view in self._views[1:]:
            view.__dict__.pop("_knots", None)
            view.__dict__.pop("_dticks", None)

    def _extend_for(self, tick: int) -> None:
        # the decision for `tick` is settled once the concentrator waits have passed and a later tick was decided
        app = self.scenario.app
        settle = periodic_time(tick, app.pmu_rate_hz) + app.pdc_max_wait + app.spdc_max_wait
        while not self.finished and (self.t < settle or
                                     not any(d.tick > tick for d in self.stack.spdc.decisions)):
            self.advance(max(self.t + self.STRIDE, settle))

    def model_for(self, iteration: int) -> DelayModel:
        """Delay model of this run labelled ``iteration``; views share storage and grow with the run."""
        if not self._views:
            dm = DelayModel(iteration=iteration, extend=self._extend_for)
            self._extractor = _DelayExtractor(self.stack)
            self._extractor.update(dm)
            self._views.append(dm)
            return dm
        for view in self._views:
            if view.iteration == iteration:
                return view
        first = self._views[0]
        view = DelayModel(first.entries, iteration, first.decisions, extend=self._extend_for)
        self._views.append(view)
        return view

    @property
    def delay_model(self) -> DelayModel:
        return self.model_for(self.iteration)


def probe_pdf0(base: NetworkBase, scenario: Scenario) -> tuple[DelayModel, CommStack]:
    """pdf_0 from one forced command batch at the probe timestamp (monitoring-only scenarios: plain run)."""
    if not scenario.control:
        stack = base.fork_at(scenario.t_end)
        return extract_delay_model(stack, 0), stack
    rate = scenario.app.pmu_rate_hz
    k = 0
    while periodic_time(k, rate) < scenario.config.control.probe_timestamp:
        k += 1
    tau = periodic_time(k, rate)
    run = NetworkRun(scenario, base.fork_at(tau), 0, {k: [0]})
    run.stack.spdc.forced = run.forced
    run.run_until_delivered()
    missing = sorted(b for b, h in run.stack.loads.items() if not any(r[0] == k for r in h.received))
    if missing:
        raise ProbeDropped(missing)
    return extract_delay_model(run.stack, 0), run.stack


def start_network_rerun(base: NetworkBase, scenario: Scenario, additional: AdditionalTrafficLog,
                        iteration: int) -> NetworkRun:
    forced = additional.forced_triggers()
    if not forced:
        return NetworkRun(scenario, base.fork_at(scenario.t_end), iteration, forced)
    run = NetworkRun(scenario, base.fork_at(additional.first_timestamp()), iteration, forced)
    run.stack.spdc.forced = forced
    run.run_until_delivered()
    return run


def network_rerun(base: NetworkBase, scenario: Scenario, additional: AdditionalTrafficLog,
                  iteration: int) -> tuple[DelayModel, CommStack]:
    """Full network run with monitoring plus the logged command traffic; returns pdf_{i+1}."""
    run = start_network_rerun(base, scenario, additional, iteration).finish()
    return run.delay_model, run.stack


# -- grid side ----------------------------------------------------------------------

@dataclass
class _TickRecord:
    grid: GridCheckpoint                                   # state at the tick, before sampling
    decision: Optional[tuple[SimTime, tuple[int, ...]]]
    fired: tuple[int, ...]
    events: list[tuple[SimTime, int, int]]                 # (time, load bus, threshold) as scheduled


def _spdc_decide(avg: float, thresholds: tuple[float, ...], next_threshold: int) -> list[int]:
    fired = []
    while next_threshold + len(fired) < len(thresholds) and avg < thresholds[next_threshold + len(fired)]:
        fired.append(next_threshold + len(fired))
    return fired


class PowerRun:
    """Grid run with the measurement chain and command delivery replaced by a delay model.

    The run pauses once every threshold has fired: nothing after that can change the command
    traffic, and only the final iteration's trajectory is needed to the end (``finish``).
    Given a previous run, it replays that run's recorded ticks and restarts integration at the
    last tick whose state cannot differ, which gives the same result as starting from zero.
    """

    def __init__(self, scenario: Scenario, delay_model: DelayModel, previous: Optional["PowerRun"] = None):
        self.scenario = scenario
        self.delay_model = delay_model
        self.additional = AdditionalTrafficLog()
        self.triggers: list[tuple[int, SimTime, int]] = []
        self.records: list[_TickRecord] = []
        self.next_threshold = 0
        self.resumed_at: Optional[SimTime] = None
        app = scenario.app
        model = scenario.power_model
        self._bus_idx = {b: model.case.bus_index(b) for b in model.case.bus_ids}
        self._paths = {b: (SPDC, load_name(b)) for b in app.load_buses}
        if scenario.control:
            for path in self._paths.values():
                if path not in delay_model.entries:
                    raise UncoveredPath(f"delay model has no entry for {path[0]}->{path[1]}")
        start = self._replay(previous) if previous is not None else 0
        if previous is None or start is None:
            self.sim = GridSimulator(model, step_ns=scenario.config.grid.step, trajectory=Trajectory())
            for ev in scenario.grid_events():
                self.sim.schedule(ev)
            self.sim._record_step()
            self.k = 0
        self._run(stop_when_quiet=True)

    # replay ---------------------------------------------------------------

    def _actions(self, k: int, tau: SimTime, dec, fired) -> list[tuple[SimTime, int, int]]:
        return [(tau + interpolate_delay(self.delay_model, self._paths[b], tau), b, idx)
                for idx in fired for b in self.scenario.app.load_buses]

    def _replay(self, prev: "PowerRun") -> Optional[int]:
        rate = self.scenario.app.pmu_rate_hz
        diverge = math.inf
        best = None
        actions: list[list[tuple[SimTime, int, int]]] = []
        decisions = []
        for j, rec in enumerate(prev.records):
            tau = periodic_time(j, rate)
            if tau > diverge:
                break
            best = j
            dec = self.delay_model.decision(j)
            # the grid only sees which sources were averaged; the decision delay moves traffic only
            if (dec is None) != (rec.decision is None) or (dec is not None and dec[1] != rec.decision[1]):
                break
            decisions.append(dec)
            new = self._actions(j, tau, dec, rec.fired)
            for a, b in zip(new, rec.events):
                if a != b:
                    diverge = min(diverge, a[0], b[0])
            actions.append(new)
        if best is None:
            return None
        # ticks before `best` are taken over unchanged apart from command timing
        for j in range(best):
            rec = prev.records[j]
            self.records.append(_TickRecord(rec.grid, decisions[j], rec.fired, actions[j]))
            self._emit(j, periodic_time(j, rate), decisions[j], rec.fired, actions[j])
        cp = prev.records[best].grid
        sim = GridSimulator.resume(self.scenario.power_model, cp, prev.sim.trajectory)
        sim._events = []
        sim._seq = 0
        t0 = cp.state.time
        for ev in self.scenario.grid_events():
            if ev.at >= t0:
                sim.schedule(ev)
        for acts in actions[:best]:
            for at, bus, idx in acts:
                if at >= t0:
                    sim.schedule(GridEvent(at, LoadReduction(bus, self.scenario.app.reduction_fraction, idx)))
        self.sim = sim
        self.k = best
        self.resumed_at = t0
        return best

    # main loop ------------------------------------------------------------

    def _emit(self, k: int, tau: SimTime, dec, fired, acts) -> None:
        size = self.scenario.net_params.packet_size_bytes
        for idx in fired:
            self.next_threshold = idx + 1
            self.triggers.append((k, tau, idx))
        for at, bus, idx in acts:
            self.additional.append(AdditionalTraffic(tau + dec[0], SPDC, load_name(bus), CONTROL_COMMAND,
                                                     size, idx, k, tau))

    @property
    def quiet(self) -> bool:
        """No further command traffic is possible."""
        return not self.scenario.control or self.next_threshold >= len(self.scenario.app.thresholds_hz)

    def _run(self, stop_when_quiet: bool) -> None:
        sc = self.scenario
        sim = self.sim
        rate = sc.app.pmu_rate_hz
        fraction = sc.app.reduction_fraction
        while True:
            if stop_when_quiet and sc.control and self.quiet:
                return
            tau = periodic_time(self.k, rate)
            if tau >= sc.t_end:
                break
            sim.advance_to(tau)
            k = self.k
            if sc.control and not self.quiet:
                cp = sim.checkpoint()
                sim.record_sample()
                dec = self.delay_model.decision(k)
                fired: list[int] = []
                if dec is not None:
                    f = sim.trajectory.freq[-1]
                    avg = math.fsum(float(f[self._bus_idx[b]]) for b in dec[1]) / len(dec[1])
                    fired = _spdc_decide(avg, sc.app.thresholds_hz, self.next_threshold)
                acts = self._actions(k, tau, dec, fired)
                for at, bus, idx in acts:
                    sim.schedule(GridEvent(at, LoadReduction(bus, fraction, idx)))
                self.records.append(_TickRecord(cp, dec, tuple(fired), acts))
                self._emit(k, tau, dec, fired, acts)
            else:
                sim.record_sample()
            self.k += 1
        sim.advance_to(sc.t_end)
        traj = sim.trajectory
        traj.final_state = sim.state  # type: ignore[attr-defined]
        traj.steps = sim.steps  # type: ignore[attr-defined]

    @property
    def finished(self) -> bool:
        return self.sim.t >= self.scenario.t_end

    def finish(self) -> "PowerRun":
        if not self.finished:
            self._run(stop_when_quiet=False)
        return self

    @property
    def trajectory(self) -> Trajectory:
        return self.sim.trajectory


def power_run(scenario: Scenario, delay_model: DelayModel,
              previous: Optional[PowerRun] = None) -> PowerRun:
    """Complete power run: trajectory to ``t_end``, additional traffic and trigger timestamps."""
    return PowerRun(scenario, delay_model, previous).finish()


# -- reports ------------------------------------------------------------------------

Arrival = tuple[int, SimTime, SimTime]        # (threshold index, timestamp, arrival time)


@dataclass
class ConvergenceReport:
    norms_ms: list[float]
    epsilon_ms: float
    iterations: int
    converged: bool

    def to_dict(self) -> dict:
        return {"norms_ms": self.norms_ms, "epsilon_ms": self.epsilon_ms,
                "iterations": self.iterations, "converged": self.converged}


@dataclass
class RunReport:
    method: str
    scenario: str
    triggers: list[tuple[int, SimTime, int]]
    arrivals: dict[int, list[Arrival]]                      # network-exact, per load bus
    perceived: Optional[dict[int, list[Arrival]]] = None    # as applied by the grid (co-simulation)
    iterations: int = 0
    norms_ms: list[float] = field(default_factory=list)
    epsilon_ms: Optional[float] = None
    converged: Optional[bool] = None
    sync_steps: int = 0
    min_net_sync_ns: Optional[SimTime] = None
    timings_ms: dict[str, float] = field(default_factory=dict)
    # bulk results, not serialized
    trajectory: Optional[Trajectory] = field(default=None, repr=False)
    delay_models: list[DelayModel] = field(default_factory=list, repr=False)
    traces: list[DelayTrace] = field(default_factory=list, repr=False)
    stack: Optional[CommStack] = field(default=None, repr=False)

    @property
    def wall_clock_ms(self) -> float:
        return self.timings_ms.get("total", math.fsum(self.timings_ms.values()))

    def measurement_delays(self) -> dict[int, list[tuple[SimTime, SimTime]]]:
        """Per source bus: (timestamp, arrival at the SPDC) for every aggregated measurement."""
        out: dict[int, list[tuple[SimTime, SimTime]]] = {}
        rate = self.stack.params.pmu_rate_hz
        for (bus, tick), t in sorted(self.stack.spdc.arrivals.items()):
            out.setdefault(bus, []).append((periodic_time(tick, rate), t))
        return out

    def to_dict(self) -> dict:
        def arr(d):
            return None if d is None else {str(b): [list(a) for a in v] for b, v in sorted(d.items())}
        return {
            "method": self.method,
            "scenario": self.scenario,
            "iterations": self.iterations,
            "norms_ms": self.norms_ms,
            "epsilon_ms": self.epsilon_ms,
            "converged": self.converged,
            "sync_steps": self.sync_steps,
            "min_net_sync_ns": self.min_net_sync_ns,
            "triggers": [list(t) for t in self.triggers],
            "arrivals_ns": arr(self.arrivals),
            "perceived_arrivals_ns": arr(self.perceived),
            "timings_ms": self.timings_ms,
        }

    def to_json(self, timings: bool = True) -> str:
        d = self.to_dict()
        if not timings:
            d.pop("timings_ms")
        return json.dumps(d, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        def arr(x):
            return None if x is None else {int(b): [tuple(a) for a in v] for b, v in x.items()}
        return cls(method=d["method"], scenario=d["scenario"], triggers=[tuple(t) for t in d["triggers"]],
                   arrivals=arr(d["arrivals_ns"]), perceived=arr(d.get("perceived_arrivals_ns")),
                   iterations=d.get("iterations", 0), norms_ms=d.get("norms_ms", []),
                   epsilon_ms=d.get("epsilon_ms"), converged=d.get("converged"),
                   sync_steps=d.get("sync_steps", 0), min_net_sync_ns=d.get("min_net_sync_ns"),
                   timings_ms=d.get("timings_ms", {}))


def _arrivals_from_model(scenario: Scenario, dm: DelayModel,
                         triggers: list[tuple[int, SimTime, int]]) -> dict[int, list[Arrival]]:
    out: dict[int, list[Arrival]] = {}
    for bus in scenario.app.load_buses:
        path = (SPDC, load_name(bus))
        out[bus] = [(idx, tau, tau + interpolate_delay(dm, path, tau)) for _, tau, idx in triggers]
    return out


# -- self-consistent simulation ------------------------------------------------------

def self_consistent_simulate(scenario: Scenario, epsilon_ms: Optional[float] = None,
                             max_iter: Optional[int] = None) -> tuple[RunReport, ConvergenceReport]:
    eps = scenario.config.run.epsilon_ms if epsilon_ms is None else epsilon_ms
    max_iter = scenario.config.run.max_iter if max_iter is None else max_iter
    if eps <= 0 or max_iter < 1:
        raise ValueError("need epsilon_ms > 0 and max_iter >= 1")
    timings: dict[str, float] = {}
    t_start = time.perf_counter()

    def lap(name: str, t0: float) -> float:
        now = time.perf_counter()
        timings[name] = (now - t0) * 1e3
        return now

    t0 = time.perf_counter()
    scenario.power_model
    t0 = lap("grid_model", t0)
    base = NetworkBase(scenario)
    pdf, stack = probe_pdf0(base, scenario)
    t0 = lap("probe", t0)
    models = [pdf]
    traces = [stack.net.trace]
    norms: list[float] = []
    paths = scenario.paths_of_interest
    converged = False
    run: Optional[PowerRun] = None
    net: Optional[NetworkRun] = None
    reruns: dict[tuple, NetworkRun] = {}
    for i in range(1, max_iter + 1):
        run = PowerRun(scenario, pdf, run)
        t0 = lap(f"power_run_{i}", t0)
        forced = run.additional.forced_triggers()
        key = tuple(sorted((k, tuple(v)) for k, v in forced.items()))
        net = reruns.get(key)
        if net is None:
            net = reruns[key] = start_network_rerun(base, scenario, run.additional, i)
        new = net.model_for(i)
        t0 = lap(f"network_rerun_{i}", t0)
        models.append(new)
        norms.append(convergence_norm(pdf, new, paths))
        if norms[-1] <= eps:
            converged = True
            break
        pdf = new
    run.finish()
    net.finish()
    t0 = lap("finish", t0)
    stack = net.stack
    traces.extend(r.stack.net.trace for r in reruns.values())
    timings["total"] = (time.perf_counter() - t_start) * 1e3
    report = RunReport("self_consistent", scenario.name, run.triggers,
                       _arrivals_from_model(scenario, models[-1], run.triggers),
                       iterations=len(norms), norms_ms=norms, epsilon_ms=eps, converged=converged,
                       timings_ms=timings, trajectory=run.trajectory, delay_models=models, traces=traces,
                       stack=stack)
    conv = ConvergenceReport(norms, eps, len(norms), converged)
    if not converged:
        raise NotConverged(max_iter, norms, report)
    return report, conv


# -- co-simulation -------------------------------------------------------------------

def cosim_simulate(scenario: Scenario, min_net_sync: Optional[SimTime] = None) -> RunReport:
    """Lockstep run; command deliveries reach the grid at the first sync point at or after them."""
    min_sync = scenario.config.run.min_net_sync if min_net_sync is None else min_net_sync
    if min_sync < 0:
        raise ValueError("min_net_sync must be non-negative")
    t_start = time.perf_counter()
    model = scenario.power_model
    t_end = scenario.t_end
    rate = scenario.app.pmu_rate_hz
    sim = GridSimulator(model, step_ns=scenario.config.grid.step, trajectory=Trajectory())
    grid_events = scenario.grid_events()
    for ev in grid_events:
        sim.schedule(ev)
    sim._record_step()
    bus_idx = {b: model.case.bus_index(b) for b in model.case.bus_ids}
    phasors: list = [None, None]

    def sampler(bus: int, k: int, tau: SimTime) -> tuple[float, float, float]:
        if phasors[0] != tau:
            if sim.t != tau:
                raise RuntimeError(f"grid at {sim.t} ns sampled for timestamp {tau} ns")
            phasors[0], phasors[1] = tau, sim.bus_phasors()
        vm, va, f = phasors[1]
        i = bus_idx[bus]
        return float(vm[i]), float(va[i]), float(f[i])

    stack = scenario.new_stack(forced=None, sampler=sampler)
    net = stack.net
    pending: list[tuple[int, int, float, SimTime, SimTime]] = []

    def on_command(host, idx: int, fraction: float, tau: SimTime, t: SimTime) -> None:
        pending.append((host.bus, idx, fraction, tau, t))

    for h in stack.loads.values():
        h.on_command = on_command
    exact: dict[int, list[Arrival]] = {b: [] for b in scenario.app.load_buses}
    perceived: dict[int, list[Arrival]] = {b: [] for b in scenario.app.load_buses}
    grid_times = sorted({ev.at for ev in grid_events})
    s: SimTime = 0
    k = 0
    steps = 0
    while s < t_end:
        tick = periodic_time(k, rate)
        while grid_times and grid_times[0] <= s:
            grid_times.pop(0)
        cand = [t_end]
        if tick < t_end:
            cand.append(tick)
        if grid_times:
            cand.append(grid_times[0])
        n = net.queue.peek_time()
        if n is not None:
            cand.append(max(n, s + min_sync))
        sync = min(cand)
        sim.advance_to(sync)
        if sync == tick:
            sim.record_sample()
        net.run_until(sync)
        for bus, idx, fraction, tau, t in pending:
            sim.schedule(GridEvent(sync, LoadReduction(bus, fraction, idx)))
            exact[bus].append((idx, tau, t))
            perceived[bus].append((idx, tau, sync))
        pending.clear()
        if sync == tick:
            k += 1
        s = sync
        steps += 1
    sim.advance_to(t_end)
    traj = sim.trajectory
    traj.final_state = sim.state  # type: ignore[attr-defined]
    traj.steps = sim.steps  # type: ignore[attr-defined]
    triggers = [(tick, periodic_time(tick, rate), idx) for tick, idx, _ in stack.spdc.commands]
    wall = (time.perf_counter() - t_start) * 1e3
    return RunReport("cosim", scenario.name, triggers, exact, perceived, sync_steps=steps,
                     min_net_sync_ns=min_sync, timings_ms={"total": wall}, trajectory=traj,
                     traces=[net.trace], stack=stack)


# -- comparison ----------------------------------------------------------------------

@dataclass
class Comparison:
    deltas_ms: dict[tuple[int, int], float]      # (load bus, threshold index) -> b - a
    max_abs_ms: float
    tolerance_ms: float

    @property
    def passed(self) -> bool:
        return self.max_abs_ms <= self.tolerance_ms


def compare_arrivals(a: dict[int, list[Arrival]], b: dict[int, list[Arrival]],
                     tolerance_ms: float) -> Comparison:
    if set(a) != set(b):
        raise ScenarioMismatch("reports cover different load sets")
    deltas: dict[tuple[int, int], float] = {}
    for bus in sorted(a):
        ia = {idx: t for idx, _, t in a[bus]}
        ib = {idx: t for idx, _, t in b[bus]}
        if set(ia) != set(ib):
            raise ScenarioMismatch(f"load {bus}: commands {sorted(ia)} vs {sorted(ib)}")
        for idx in sorted(ia):
            deltas[(bus, idx)] = (ib[idx] - ia[idx]) / NS_PER_MS
    worst = max((abs(v) for v in deltas.values()), default=0.0)
    return Comparison(deltas, worst, tolerance_ms)


def compare_reports(a: RunReport, b: RunReport, tolerance_ms: float) -> Comparison:
    if a.scenario != b.scenario:
        raise ScenarioMismatch(f"scenario {a.scenario!r} vs {b.scenario!r}")
    return compare_arrivals(a.arrivals, b.arrivals, tolerance_ms)
