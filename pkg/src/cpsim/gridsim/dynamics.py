"""Classical-machine transient simulation with droop governors.

Machines are constant EMFs behind transient reactance, loads are constant
admittances, and the network is Kron-reduced to the internal machine nodes.
The reduction is rebuilt after every discrete event and cached in between.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Union

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from ..desim import NS_PER_S, PastEvent, SimTime, periodic_time
from .case import GridCase, build_ybus, solve_power_flow


class UnknownTarget(KeyError):
    pass


class AlreadyTripped(RuntimeError):
    pass


class NoEquilibrium(RuntimeError):
    pass


class IntegrationDiverged(RuntimeError):
    def __init__(self, msg: str, last_valid_ns: SimTime):
        super().__init__(f"{msg} (last valid time {last_valid_ns} ns)")
        self.last_valid_ns = last_valid_ns


@dataclass(frozen=True)
class GeneratorTrip:
    gen_id: int


@dataclass(frozen=True)
class LoadReduction:
    load_bus: int
    fraction: float
    threshold_index: int = -1


@dataclass(frozen=True)
class GridEvent:
    at: SimTime
    action: Union[GeneratorTrip, LoadReduction]


class PowerModel:
    """Network, machine constants and the operating point they were initialised from."""

    def __init__(self, case: GridCase):
        self.case = case
        self.pf = solve_power_flow(case)
        base = case.base_mva
        v = self.pf.v
        self.ybus = build_ybus(case)
        self.y_load = (case.pd_mw - 1j * case.qd_mvar) / base / np.abs(v) ** 2
        gens = case.generators
        self.gen_bus_idx = np.array([case.bus_index(g.bus) for g in gens])
        scale = np.array([g.mva_base / base for g in gens])
        self.h = np.array([g.h_s for g in gens]) * scale
        self.xd = np.array([g.xd_prime_pu for g in gens]) / scale
        self.d = np.array([g.damping_pu for g in gens]) * scale
        self.pmax = np.array([g.pmax_mw for g in gens]) / base
        self.gov_gain = scale / case.droop_pu
        self.gov_tg = case.governor_tg_s
        self.f_nom = case.f_nominal_hz
        self.omega_s = 2 * math.pi * case.f_nominal_hz
        i_gen = np.conj(self.pf.s_gen / v[self.gen_bus_idx])
        e = v[self.gen_bus_idx] + 1j * self.xd * i_gen
        self.e_mag = np.abs(e)
        self.delta0 = np.angle(e)
        self.pm0 = (e * np.conj(i_gen)).real

    @property
    def total_generation_mw(self) -> float:
        return float(self.pf.s_gen.real.sum() * self.case.base_mva)

    def gen_index(self, gen_id: int) -> int:
        if not 1 <= gen_id <= len(self.case.generators):
            raise UnknownTarget(f"no generator {gen_id}")
        return gen_id - 1


def load_case(case_spec: Union[str, "GridCase", dict, None] = None) -> PowerModel:
    from .case import default_case_path, parse_case, read_case

    if case_spec is None:
        case_spec = default_case_path()
    if isinstance(case_spec, GridCase):
        case = case_spec
    elif isinstance(case_spec, dict):
        case = parse_case(case_spec)
    else:
        case = read_case(case_spec)
    return PowerModel(case)


class GridState:
    """Machine and filter states packed in one vector: angles, speed deviations, mechanical powers, bus filters."""

    def __init__(self, x: np.ndarray, ng: int, online: np.ndarray, y_load: np.ndarray, time: SimTime = 0):
        self.x = x
        self.ng = ng
        self.online = online
        self.y_load = y_load
        self.time = time

    @property
    def delta(self) -> np.ndarray:
        return self.x[: self.ng]

    @property
    def domega(self) -> np.ndarray:
        return self.x[self.ng: 2 * self.ng]

    @property
    def pm(self) -> np.ndarray:
        return self.x[2 * self.ng: 3 * self.ng]

    @property
    def fy(self) -> np.ndarray:
        return self.x[3 * self.ng:]

    def copy(self) -> "GridState":
        return GridState(self.x.copy(), self.ng, self.online.copy(), self.y_load.copy(), self.time)


def init_steady_state(model: PowerModel) -> GridState:
    ng, nb = len(model.e_mag), model.case.n_bus
    x = np.concatenate([model.delta0, np.zeros(ng), model.pm0, np.zeros(nb)])
    state = GridState(x, ng, np.ones(ng, dtype=bool), model.y_load.copy())
    sim = GridSimulator(model, state)
    worst = float(np.max(np.abs(sim.derivative(sim.state.x))))
    if worst > 1e-10:
        raise NoEquilibrium(f"initial derivatives reach {worst:.3e}")
    return state


@dataclass
class Trajectory:
    step_t: list[SimTime] = field(default_factory=list)
    f_min: list[float] = field(default_factory=list)
    f_mean: list[float] = field(default_factory=list)
    f_coi: list[float] = field(default_factory=list)
    sample_t: list[SimTime] = field(default_factory=list)
    v_mag: list[np.ndarray] = field(default_factory=list)
    theta: list[np.ndarray] = field(default_factory=list)
    freq: list[np.ndarray] = field(default_factory=list)
    events: list[tuple[SimTime, object]] = field(default_factory=list)

    def crossing_time(self, level_hz: float, series: str = "f_min") -> Optional[float]:
        """First time (s) the chosen step series falls below ``level_hz``, linearly interpolated."""
        f = getattr(self, series)
        for i in range(1, len(f)):
            if f[i] < level_hz <= f[i - 1]:
                t0, t1 = self.step_t[i - 1], self.step_t[i]
                return (t0 + (t1 - t0) * (f[i - 1] - level_hz) / (f[i - 1] - f[i])) / NS_PER_S
        return None

    def nadir(self, series: str = "f_min") -> float:
        return float(min(getattr(self, series)))


_TRAJECTORY_SERIES = ("step_t", "f_min", "f_mean", "f_coi", "sample_t", "v_mag", "theta", "freq", "events")


@dataclass
class GridCheckpoint:
    state: GridState
    events: list
    seq: int
    steps: int
    sizes: dict[str, int]
    step_ns: int = 0


class GridSimulator:
    """Fixed-step RK4 on a global lattice; events and stop points split steps exactly."""

    def __init__(self, model: PowerModel, state: Optional[GridState] = None,
                 step_ns: int = 1_000_000, trajectory: Optional[Trajectory] = None):
        self.model = model
        self.state = state.copy() if state is not None else init_steady_state(model)
        self.step_ns = step_ns
        self.trajectory = trajectory
        self._events: list[tuple[SimTime, int, GridEvent]] = []
        self._seq = 0
        self.steps = 0
        self.rebuilds = 0
        self.tf = model.case.frequency_filter_s
        self._rebuild()

    @property
    def t(self) -> SimTime:
        return self.state.time

    # -- network algebra -------------------------------------------------

    def _rebuild(self) -> None:
        m, st = self.model, self.state
        ng, nb = len(m.e_mag), m.case.n_bus
        mask = st.online.astype(float)
        yg = np.where(st.online, 1.0 / (1j * m.xd), 0.0)
        ybb = m.ybus + np.diag(st.y_load)
        bi = m.gen_bus_idx
        np.add.at(ybb, (bi, bi), yg)
        ybg = np.zeros((nb, ng), dtype=complex)
        ybg[bi, np.arange(ng)] = -yg
        self._vmap = -lu_solve(lu_factor(ybb), ybg)      # V = vmap @ E
        self._yred = np.diag(yg) + ybg.T @ self._vmap    # I = yred @ E
        self._emag = m.e_mag * mask
        self._ws_mask = m.omega_s * mask
        self._inv2h = mask / (2.0 * m.h)
        self._gov = mask / m.gov_tg if m.gov_tg > 0 else np.zeros(ng)
        self._pmax = np.maximum(m.pmax, m.pm0)
        self._ng = ng
        self.rebuilds += 1

    def derivative(self, x: np.ndarray) -> np.ndarray:
        m = self.model
        ng = self._ng
        delta, dw, pm = x[:ng], x[ng:2 * ng], x[2 * ng:3 * ng]
        out = np.empty_like(x)
        e = self._emag * np.exp(1j * delta)
        pe = (e * np.conj(self._yred @ e)).real
        out[:ng] = self._ws_mask * dw
        out[ng:2 * ng] = (pm - pe - m.d * dw) * self._inv2h
        dpm = (m.pm0 - pm - m.gov_gain * dw) * self._gov
        out[2 * ng:3 * ng] = np.where(((pm >= self._pmax) & (dpm > 0)) | ((pm <= 0.0) & (dpm < 0)), 0.0, dpm)
        if self.tf > 0:
            out[3 * ng:] = (self._angle_rate(e, dw) - x[3 * ng:]) / self.tf
        else:
            out[3 * ng:] = 0.0
        return out

    def _angle_rate(self, e: np.ndarray, dw: np.ndarray) -> np.ndarray:
        v = self._vmap @ e
        dv = self._vmap @ (e * (1j * self.model.omega_s) * dw)
        return (dv / v).imag

    # -- outputs -----------------------------------------------------------

    def bus_phasors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """|V| (pu), angle (rad) and frequency (Hz) at every bus."""
        st, m = self.state, self.model
        e = self._emag * np.exp(1j * st.delta)
        v = self._vmap @ e
        if self.tf > 0:
            rate = st.fy
        else:
            rate = self._angle_rate(e, st.domega)
        return np.abs(v), np.angle(v), m.f_nom + rate / (2 * math.pi)

    def sample_phasor(self, bus: int) -> tuple[float, float, float]:
        vm, va, f = self.bus_phasors()
        i = self.model.case.bus_index(bus)
        return float(vm[i]), float(va[i]), float(f[i])

    def coi_frequency(self) -> float:
        st, m = self.state, self.model
        w = m.h * st.online
        return float(m.f_nom * (1.0 + (w * st.domega).sum() / w.sum()))

    def bus_frequencies(self) -> np.ndarray:
        return self.bus_phasors()[2]

    # -- discrete events ---------------------------------------------------

    def schedule(self, event: GridEvent) -> None:
        if event.at < self.t:
            raise PastEvent(f"grid event at {event.at} ns is before grid time {self.t} ns")
        heapq.heappush(self._events, (event.at, self._seq, event))
        self._seq += 1

    def trip_generator(self, gen_id: int) -> None:
        g = self.model.gen_index(gen_id)
        if not self.state.online[g]:
            raise AlreadyTripped(f"generator {gen_id} is already out of service")
        self.state.online[g] = False
        self.state.domega[g] = 0.0
        self.state.pm[g] = 0.0
        self._rebuild()

    def apply_load_reduction(self, load_bus: int, fraction: float) -> None:
        if not 0.0 <= fraction < 1.0:
            raise ValueError(f"load reduction fraction must be in [0, 1), got {fraction}")
        try:
            i = self.model.case.bus_index(load_bus)
        except KeyError:
            raise UnknownTarget(f"no bus {load_bus}") from None
        if self.state.y_load[i] == 0:
            raise UnknownTarget(f"bus {load_bus} carries no load")
        if fraction == 0.0:
            return
        self.state.y_load[i] *= 1.0 - fraction
        self._rebuild()

    def _apply(self, ev: GridEvent) -> None:
        a = ev.action
        if isinstance(a, GeneratorTrip):
            self.trip_generator(a.gen_id)
        elif isinstance(a, LoadReduction):
            self.apply_load_reduction(a.load_bus, a.fraction)
        else:
            raise TypeError(f"unknown grid event {a!r}")
        if self.trajectory is not None:
            self.trajectory.events.append((ev.at, a))

    def _apply_due(self) -> None:
        while self._events and self._events[0][0] <= self.t:
            self._apply(heapq.heappop(self._events)[2])

    # -- integration -------------------------------------------------------

    def _rk4(self, dt_ns: int) -> None:
        h = dt_ns / NS_PER_S
        x = self.state.x
        f = self.derivative
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        xn = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        ng = self._ng
        if not np.all(np.isfinite(xn)) or np.max(np.abs(xn[ng:2 * ng])) > 0.5:
            raise IntegrationDiverged("state norm exploded", self.t)
        np.clip(xn[2 * ng:3 * ng], 0.0, self._pmax, out=xn[2 * ng:3 * ng])
        self.state.x = xn
        self.state.time += dt_ns
        self.steps += 1
        if self.trajectory is not None:
            self._record_step()

    def _record_step(self) -> None:
        tr = self.trajectory
        f = self.bus_frequencies()
        tr.step_t.append(self.t)
        tr.f_min.append(float(f.min()))
        tr.f_mean.append(float(f.mean()))
        tr.f_coi.append(self.coi_frequency())

    def advance_to(self, t_end: SimTime) -> None:
        """Integrate to ``t_end``. Events due at ``t_end`` stay pending so samples at ``t_end`` see the pre-event state."""
        if t_end < self.t:
            raise PastEvent(f"grid cannot go back from {self.t} to {t_end}")
        h = self.step_ns
        while self.t < t_end:
            self._apply_due()
            stop = min(t_end, (self.t // h + 1) * h)
            if self._events and self._events[0][0] < stop:
                stop = self._events[0][0]
            self._rk4(stop - self.t)

    def checkpoint(self) -> "GridCheckpoint":
        tr = self.trajectory
        sizes = {name: len(getattr(tr, name)) for name in _TRAJECTORY_SERIES} if tr is not None else {}
        return GridCheckpoint(self.state.copy(), list(self._events), self._seq, self.steps, sizes, self.step_ns)

    @classmethod
    def resume(cls, model: PowerModel, cp: "GridCheckpoint",
               history: Optional[Trajectory] = None) -> "GridSimulator":
        """Rebuild a simulator from ``cp``; ``history`` (the run it was taken from) supplies the trajectory prefix."""
        traj = None
        if history is not None:
            traj = Trajectory(**{name: list(getattr(history, name)[:n]) for name, n in cp.sizes.items()})
        sim = cls(model, cp.state, step_ns=cp.step_ns if cp.step_ns else 1_000_000, trajectory=traj)
        sim._events = list(cp.events)
        sim._seq = cp.seq
        sim.steps = cp.steps
        return sim

    def record_sample(self) -> None:
        if self.trajectory is None:
            return
        vm, va, f = self.bus_phasors()
        tr = self.trajectory
        tr.sample_t.append(self.t)
        tr.v_mag.append(vm)
        tr.theta.append(va)
        tr.freq.append(f)


Sampler = Callable[[GridSimulator, int, SimTime], None]


def integrate(model: PowerModel, state: Optional[GridState], t_end: SimTime,
              events: Iterable[GridEvent] = (), samplers: Iterable[Sampler] = (),
              sample_rate_hz: int = 30, step_ns: int = 1_000_000) -> Trajectory:
    """Run the grid to ``t_end`` calling every sampler at each PMU tick strictly before ``t_end``.

    Samplers may schedule further (future) events on the simulator they receive.
    """
    events = list(events)
    if any(b.at < a.at for a, b in zip(events, events[1:])):
        raise ValueError("events must be sorted by time")
    traj = Trajectory()
    sim = GridSimulator(model, state, step_ns=step_ns, trajectory=traj)
    for ev in events:
        sim.schedule(ev)
    samplers = list(samplers)
    sim._record_step()
    k = 0
    while True:
        tau = periodic_time(k, sample_rate_hz)
        if tau >= t_end or tau < sim.t:
            if tau < sim.t:
                k += 1
                continue
            break
        sim.advance_to(tau)
        sim.record_sample()
        for s in samplers:
            s(sim, k, tau)
        k += 1
    sim.advance_to(t_end)
    traj.final_state = sim.state  # type: ignore[attr-defined]
    traj.steps = sim.steps  # type: ignore[attr-defined]
    return traj
