"""Grid case files and the steady-state power flow."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import yaml


class ParseError(ValueError):
    pass


class PowerFlowDiverged(RuntimeError):
    pass


PQ, PV, SLACK = 1, 2, 3


@dataclass
class Generator:
    gid: int
    bus: int
    pg_mw: float
    v_set_pu: float
    mva_base: float
    h_s: float
    xd_prime_pu: float
    damping_pu: float
    pmax_mw: float


@dataclass
class Branch:
    from_bus: int
    to_bus: int
    r_pu: float
    x_pu: float
    b_pu: float
    tap: float

    def reactance_ohm(self, base_kv: float, base_mva: float) -> float:
        return abs(self.x_pu) * base_kv**2 / base_mva


@dataclass
class GridCase:
    name: str
    base_mva: float
    base_kv: float
    f_nominal_hz: float
    bus_ids: list[int]
    bus_type: np.ndarray
    pd_mw: np.ndarray
    qd_mvar: np.ndarray
    generators: list[Generator]
    branches: list[Branch]
    droop_pu: float = 0.05
    governor_tg_s: float = 5.0
    frequency_filter_s: float = 0.1
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    def bus_index(self, bus: int) -> int:
        try:
            return self._index[bus]
        except AttributeError:
            self._index = {b: i for i, b in enumerate(self.bus_ids)}
            return self._index[bus]
        except KeyError:
            raise KeyError(f"unknown bus {bus}") from None

    def load_buses(self) -> list[int]:
        return [b for b, p, q in zip(self.bus_ids, self.pd_mw, self.qd_mvar) if p != 0 or q != 0]


def _rows(doc: dict, key: str, cols_key: str, expected: list[str]) -> list[dict]:
    if key not in doc:
        raise ParseError(f"case is missing '{key}'")
    cols = doc.get(cols_key, expected)
    if list(cols) != expected:
        raise ParseError(f"'{cols_key}' must be {expected}, got {cols}")
    out = []
    for i, row in enumerate(doc[key]):
        if len(row) != len(cols):
            raise ParseError(f"{key}[{i}] has {len(row)} fields, expected {len(cols)}")
        out.append(dict(zip(cols, row)))
    return out


BUS_COLS = ["bus", "type", "pd_mw", "qd_mvar"]
GEN_COLS = ["bus", "pg_mw", "v_set_pu", "mva_base", "h_s", "xd_prime_pu", "damping_pu", "pmax_mw"]
BRANCH_COLS = ["from_bus", "to_bus", "r_pu", "x_pu", "b_pu", "tap"]


def parse_case(doc: dict) -> GridCase:
    try:
        buses = _rows(doc, "buses", "bus_columns", BUS_COLS)
        gens = _rows(doc, "generators", "generator_columns", GEN_COLS)
        branches = _rows(doc, "branches", "branch_columns", BRANCH_COLS)
        gov = doc.get("governor", {})
        case = GridCase(
            name=str(doc.get("name", "case")),
            base_mva=float(doc["base_mva"]),
            base_kv=float(doc["base_kv"]),
            f_nominal_hz=float(doc["f_nominal_hz"]),
            bus_ids=[int(b["bus"]) for b in buses],
            bus_type=np.array([int(b["type"]) for b in buses]),
            pd_mw=np.array([float(b["pd_mw"]) for b in buses]),
            qd_mvar=np.array([float(b["qd_mvar"]) for b in buses]),
            generators=[Generator(gid=i + 1, **{k: (int(v) if k == "bus" else float(v)) for k, v in g.items()})
                        for i, g in enumerate(gens)],
            branches=[Branch(int(b["from_bus"]), int(b["to_bus"]), float(b["r_pu"]), float(b["x_pu"]),
                             float(b["b_pu"]), float(b["tap"])) for b in branches],
            droop_pu=float(gov.get("droop_pu", 0.05)),
            governor_tg_s=float(gov.get("time_constant_s", 5.0)),
            frequency_filter_s=float(doc.get("frequency_filter_s", 0.1)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"malformed case: {exc!r}") from exc
    known = set(case.bus_ids)
    if len(known) != len(case.bus_ids):
        raise ParseError("duplicate bus ids")
    for br in case.branches:
        if br.from_bus not in known or br.to_bus not in known:
            raise ParseError(f"branch {br.from_bus}-{br.to_bus} references an unknown bus")
    for g in case.generators:
        if g.bus not in known:
            raise ParseError(f"generator at unknown bus {g.bus}")
        if g.h_s <= 0 or g.xd_prime_pu <= 0 or g.mva_base <= 0:
            raise ParseError(f"generator {g.gid} needs positive h_s, xd_prime_pu and mva_base")
    if int((case.bus_type == SLACK).sum()) != 1:
        raise ParseError("exactly one slack bus is required")
    return case


def read_case(path: Union[str, Path]) -> GridCase:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: expected a mapping at top level")
    return parse_case(doc)


def default_case_path() -> Path:
    return Path(__file__).resolve().parent.parent / "data" / "ieee39.yaml"


def calibrated(case: GridCase, *, inertia_scale: Optional[float] = None, droop_pu: Optional[float] = None,
               governor_tg_s: Optional[float] = None, frequency_filter_s: Optional[float] = None,
               inertia_h_s: Optional[dict[int, float]] = None) -> GridCase:
    """Copy of ``case`` with machine/governor constants overridden (unset arguments keep the case values)."""
    gens = [replace(g) for g in case.generators]
    for gid, h in (inertia_h_s or {}).items():
        if not 1 <= gid <= len(gens):
            raise ParseError(f"inertia override for unknown generator {gid}")
        gens[gid - 1].h_s = float(h)
    if inertia_scale is not None:
        for g in gens:
            g.h_s *= inertia_scale
    out = replace(case, generators=gens)
    if droop_pu is not None:
        out.droop_pu = droop_pu
    if governor_tg_s is not None:
        out.governor_tg_s = governor_tg_s
    if frequency_filter_s is not None:
        out.frequency_filter_s = frequency_filter_s
    return out


def build_ybus(case: GridCase) -> np.ndarray:
    n = case.n_bus
    y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        f, t = case.bus_index(br.from_bus), case.bus_index(br.to_bus)
        ys = 1.0 / complex(br.r_pu, br.x_pu)
        tap = br.tap if br.tap else 1.0
        bc = 0.5j * br.b_pu
        y[f, f] += (ys + bc) / tap**2
        y[t, t] += ys + bc
        y[f, t] -= ys / tap
        y[t, f] -= ys / tap
    return y


@dataclass
class PowerFlow:
    v: np.ndarray          # complex bus voltages, pu
    s_gen: np.ndarray      # complex generation per generator, pu
    iterations: int
    residual: float


def solve_power_flow(case: GridCase, tol: float = 1e-10, max_iter: int = 30) -> PowerFlow:
    """Newton-Raphson in polar coordinates with PV buses held at their set-points."""
    n = case.n_bus
    ybus = build_ybus(case)
    base = case.base_mva
    s_spec = -(case.pd_mw + 1j * case.qd_mvar) / base
    vm = np.ones(n)
    va = np.zeros(n)
    for g in case.generators:
        i = case.bus_index(g.bus)
        vm[i] = g.v_set_pu
        if case.bus_type[i] != SLACK:
            s_spec[i] += g.pg_mw / base
    pv = np.flatnonzero(case.bus_type == PV)
    pq = np.flatnonzero(case.bus_type == PQ)
    pvpq = np.concatenate([pv, pq])
    v = vm * np.exp(1j * va)

    def mismatch(v):
        s = v * np.conj(ybus @ v)
        d = s - s_spec
        return np.concatenate([d.real[pvpq], d.imag[pq]])

    f = mismatch(v)
    it = 0
    while np.max(np.abs(f)) > tol:
        if it >= max_iter or not np.all(np.isfinite(f)):
            raise PowerFlowDiverged(f"no convergence after {it} iterations (|F|={np.max(np.abs(f)):.3e})")
        ibus = ybus @ v
        vn = v / np.abs(v)
        ds_dvm = np.diag(v) @ np.conj(ybus @ np.diag(vn)) + np.diag(np.conj(ibus) * vn)
        ds_dva = 1j * np.diag(v) @ np.conj(np.diag(ibus) - ybus @ np.diag(v))
        jac = np.block([
            [ds_dva.real[np.ix_(pvpq, pvpq)], ds_dvm.real[np.ix_(pvpq, pq)]],
            [ds_dva.imag[np.ix_(pq, pvpq)], ds_dvm.imag[np.ix_(pq, pq)]],
        ])
        dx = np.linalg.solve(jac, -f)
        va[pvpq] += dx[: len(pvpq)]
        vm[pq] += dx[len(pvpq):]
        v = vm * np.exp(1j * va)
        f = mismatch(v)
        it += 1
    s_inj = v * np.conj(ybus @ v)
    s_load = (case.pd_mw + 1j * case.qd_mvar) / base
    s_gen = np.array([s_inj[case.bus_index(g.bus)] + s_load[case.bus_index(g.bus)] for g in case.generators])
    # one machine per generator bus in the shipped cases; split evenly otherwise
    counts: dict[int, int] = {}
    for g in case.generators:
        counts[g.bus] = counts.get(g.bus, 0) + 1
    s_gen = np.array([s / counts[g.bus] for s, g in zip(s_gen, case.generators)])
    return PowerFlow(v=v, s_gen=s_gen, iterations=it, residual=float(np.max(np.abs(f))))
