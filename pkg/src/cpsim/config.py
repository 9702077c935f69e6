"""Scenario configuration.

Files are YAML with the unit in every field name (``bandwidth_bps``, ``max_wait_ms``, ``at_s``).
Units are converted once, at parse time: all times are held as integer nanoseconds afterwards.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from .desim import SimTime, millis, seconds, to_millis, to_seconds

METHODS = ("self_consistent", "cosim", "both")
SCENARIO_DIR = Path(__file__).parent / "scenarios"


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str, line: Optional[int] = None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{field_name}{where}: {message}")
        self.field = field_name
        self.line = line


@dataclass(frozen=True)
class GeneratorTripSpec:
    gen_id: int
    at: SimTime


@dataclass(frozen=True)
class LinkFailureSpec:
    bus_a: int
    bus_b: int
    at: SimTime


@dataclass
class GridConfig:
    case_path: Optional[str] = None
    inertia_scale: float = 1.0
    inertia_h_s: dict[int, float] = field(default_factory=dict)
    droop_pu: Optional[float] = None
    governor_tg_s: Optional[float] = None
    frequency_filter_s: Optional[float] = None
    step: SimTime = 1_000_000


@dataclass
class NetConfig:
    bandwidth_bps: int = 800_000
    packet_size_bytes: int = 500
    refractive_index: float = 1.5
    ohm_per_km: float = 0.3


@dataclass
class HostConfig:
    pmu_rate_hz: int = 30
    pdc_buses: tuple[int, ...] = (2, 6, 21, 27)
    spdc_bus: int = 16
    pdc_zones: Optional[dict[int, tuple[int, ...]]] = None
    load_buses: Optional[tuple[int, ...]] = None       # None: every bus carrying load
    pdc_max_wait: SimTime = 100_000_000
    spdc_max_wait: SimTime = 100_000_000


@dataclass
class ControlConfig:
    enabled: bool = True
    thresholds_hz: tuple[float, ...] = (49.96, 49.92, 49.88)
    reduction_fraction: float = 0.02
    probe_timestamp: SimTime = 500_000_000


@dataclass
class EventConfig:
    generator_trips: tuple[GeneratorTripSpec, ...] = ()
    link_failures: tuple[LinkFailureSpec, ...] = ()


@dataclass
class RunConfig:
    method: str = "both"
    epsilon_ms: float = 1.0
    max_iter: int = 10
    min_net_sync: SimTime = 1_000_000
    t_end: SimTime = 5_000_000_000
    output_dir: str = "out"
    seed: int = 0            # reserved for a stochastic delay mode


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    grid: GridConfig = field(default_factory=GridConfig)
    network: NetConfig = field(default_factory=NetConfig)
    hosts: HostConfig = field(default_factory=HostConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    events: EventConfig = field(default_factory=EventConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def with_overrides(self, **changes: Any) -> "ScenarioConfig":
        """Copy with dotted-path overrides, e.g. ``{"network.bandwidth_bps": 1_600_000}``."""
        out = dataclasses.replace(self)
        for path, value in changes.items():
            section, _, name = path.replace("__", ".").partition(".")
            if not name:
                out = dataclasses.replace(out, **{section: value})
                continue
            sub = dataclasses.replace(getattr(out, section), **{name: value})
            out = dataclasses.replace(out, **{section: sub})
        validate(out)
        return out


# -- YAML mapping -------------------------------------------------------------
# (section, yaml key, attribute, to-internal, to-yaml)

def _ident(x):
    return x


def _tuple_int(x):
    return tuple(int(v) for v in x)


def _zones_in(x):
    if x is None:
        return None
    return {int(k): tuple(int(b) for b in v) for k, v in x.items()}


def _zones_out(x):
    if x is None:
        return None
    return {k: list(v) for k, v in x.items()}


def _opt_tuple_int(x):
    return None if x is None else _tuple_int(x)


def _opt_list(x):
    return None if x is None else list(x)


def _opt_float(x):
    return None if x is None else float(x)


_FIELDS: dict[str, list[tuple[str, str, Any, Any]]] = {
    "grid": [
        ("case_path", "case_path", _ident, _ident),
        ("inertia_scale", "inertia_scale", float, _ident),
        ("inertia_h_s", "inertia_h_s", lambda d: {int(k): float(v) for k, v in (d or {}).items()}, dict),
        ("droop_pu", "droop_pu", _opt_float, _ident),
        ("governor_tg_s", "governor_tg_s", _opt_float, _ident),
        ("frequency_filter_s", "frequency_filter_s", _opt_float, _ident),
        ("step_ms", "step", millis, to_millis),
    ],
    "network": [
        ("bandwidth_bps", "bandwidth_bps", int, _ident),
        ("packet_size_bytes", "packet_size_bytes", int, _ident),
        ("refractive_index", "refractive_index", float, _ident),
        ("ohm_per_km", "ohm_per_km", float, _ident),
    ],
    "hosts": [
        ("pmu_rate_hz", "pmu_rate_hz", int, _ident),
        ("pdc_buses", "pdc_buses", _tuple_int, list),
        ("spdc_bus", "spdc_bus", int, _ident),
        ("pdc_zones", "pdc_zones", _zones_in, _zones_out),
        ("load_buses", "load_buses", _opt_tuple_int, _opt_list),
        ("pdc_max_wait_ms", "pdc_max_wait", millis, to_millis),
        ("spdc_max_wait_ms", "spdc_max_wait", millis, to_millis),
    ],
    "control": [
        ("enabled", "enabled", bool, _ident),
        ("thresholds_hz", "thresholds_hz", lambda x: tuple(float(v) for v in x), list),
        ("reduction_fraction", "reduction_fraction", float, _ident),
        ("probe_timestamp_s", "probe_timestamp", seconds, to_seconds),
    ],
    "events": [
        ("generator_trips", "generator_trips",
         lambda xs: tuple(GeneratorTripSpec(int(x["gen_id"]), seconds(x["at_s"])) for x in xs or ()),
         lambda xs: [{"gen_id": x.gen_id, "at_s": to_seconds(x.at)} for x in xs]),
        ("link_failures", "link_failures",
         lambda xs: tuple(LinkFailureSpec(int(x["bus_a"]), int(x["bus_b"]), seconds(x["at_s"])) for x in xs or ()),
         lambda xs: [{"bus_a": x.bus_a, "bus_b": x.bus_b, "at_s": to_seconds(x.at)} for x in xs]),
    ],
    "run": [
        ("method", "method", str, _ident),
        ("epsilon_ms", "epsilon_ms", float, _ident),
        ("max_iter", "max_iter", int, _ident),
        ("min_net_sync_ms", "min_net_sync", millis, to_millis),
        ("t_end_s", "t_end", seconds, to_seconds),
        ("output_dir", "output_dir", str, _ident),
        ("seed", "seed", int, _ident),
    ],
}

_SECTIONS = {"grid": GridConfig, "network": NetConfig, "hosts": HostConfig, "control": ControlConfig,
             "events": EventConfig, "run": RunConfig}


def _line_map(text: str) -> dict[str, int]:
    """Dotted key path -> 1-based line number, for error messages."""
    out: dict[str, int] = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}.{k.value}" if prefix else str(k.value)
                out[path] = k.start_mark.line + 1
                walk(v, path)

    try:
        walk(yaml.compose(text), "")
    except yaml.YAMLError:
        pass
    return out


def parse_config(text: str) -> ScenarioConfig:
    lines = _line_map(text)
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError("<document>", f"invalid YAML: {exc}", mark.line + 1 if mark else None) from None
    if not isinstance(doc, dict):
        raise ConfigError("<document>", "top level must be a mapping")
    cfg = ScenarioConfig()
    for key in doc:
        if key != "name" and key not in _SECTIONS:
            raise ConfigError(str(key), "unknown section", lines.get(str(key)))
    if "name" in doc:
        cfg.name = str(doc["name"])
    for section, cls in _SECTIONS.items():
        raw = doc.get(section) or {}
        if not isinstance(raw, dict):
            raise ConfigError(section, "must be a mapping", lines.get(section))
        known = {k for k, _, _, _ in _FIELDS[section]}
        for k in raw:
            if k not in known:
                raise ConfigError(f"{section}.{k}", "unknown field", lines.get(f"{section}.{k}"))
        values = {}
        for key, attr, conv, _ in _FIELDS[section]:
            if key in raw:
                try:
                    values[attr] = conv(raw[key])
                except (TypeError, ValueError, KeyError, AttributeError) as exc:
                    raise ConfigError(f"{section}.{key}", f"bad value {raw[key]!r} ({exc})",
                                      lines.get(f"{section}.{key}")) from None
        setattr(cfg, section, cls(**values))
    validate(cfg, lines)
    return cfg


def read_config(path: Union[str, Path]) -> ScenarioConfig:
    """Read a scenario file; a bare name such as ``c1`` falls back to the shipped scenarios."""
    path = Path(path)
    if not path.exists():
        for cand in (SCENARIO_DIR / path.name, SCENARIO_DIR / f"{path.name}.yaml"):
            if cand.exists():
                path = cand
                break
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("<file>", str(exc)) from None
    return parse_config(text)


def config_to_dict(cfg: ScenarioConfig) -> dict:
    doc: dict[str, Any] = {"name": cfg.name}
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        doc[section] = {key: back(getattr(sub, attr)) for key, attr, _, back in _FIELDS[section]}
    return doc


def dump_config(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def write_config(cfg: ScenarioConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(dump_config(cfg))


def validate(cfg: ScenarioConfig, lines: Optional[dict[str, int]] = None) -> None:
    lines = lines or {}

    def fail(path: str, msg: str):
        raise ConfigError(path, msg, lines.get(path))

    g, n, h, c, e, r = cfg.grid, cfg.network, cfg.hosts, cfg.control, cfg.events, cfg.run
    if g.inertia_scale <= 0:
        fail("grid.inertia_scale", "must be positive")
    for gid, hs in g.inertia_h_s.items():
        if hs <= 0:
            fail("grid.inertia_h_s", f"inertia of generator {gid} must be positive")
    for key in ("droop_pu", "governor_tg_s"):
        v = getattr(g, key)
        if v is not None and v <= 0:
            fail(f"grid.{key}", "must be positive")
    if g.frequency_filter_s is not None and g.frequency_filter_s < 0:
        fail("grid.frequency_filter_s", "must be non-negative")
    if g.step <= 0:
        fail("grid.step_ms", "must be positive")
    for key in ("bandwidth_bps", "packet_size_bytes", "refractive_index", "ohm_per_km"):
        if getattr(n, key) <= 0:
            fail(f"network.{key}", "must be positive")
    if h.pmu_rate_hz <= 0:
        fail("hosts.pmu_rate_hz", "must be positive")
    if not h.pdc_buses:
        fail("hosts.pdc_buses", "at least one PDC is required")
    if len(set(h.pdc_buses)) != len(h.pdc_buses):
        fail("hosts.pdc_buses", "duplicate PDC bus")
    if h.pdc_max_wait <= 0:
        fail("hosts.pdc_max_wait_ms", "must be positive")
    if h.spdc_max_wait <= 0:
        fail("hosts.spdc_max_wait_ms", "must be positive")
    if h.pdc_zones is not None:
        seen: set[int] = set()
        for pdc, members in h.pdc_zones.items():
            if pdc not in h.pdc_buses:
                fail("hosts.pdc_zones", f"zone for bus {pdc}, which hosts no PDC")
            dup = seen.intersection(members)
            if dup:
                fail("hosts.pdc_zones", f"bus {min(dup)} is in two zones")
            seen.update(members)
    th = c.thresholds_hz
    if not th:
        fail("control.thresholds_hz", "at least one threshold is required")
    if any(b >= a for a, b in zip(th, th[1:])):
        fail("control.thresholds_hz", "thresholds must be strictly decreasing")
    if any(t <= 0 for t in th):
        fail("control.thresholds_hz", "must be positive")
    if not 0 < c.reduction_fraction < 1:
        fail("control.reduction_fraction", "must be in (0, 1)")
    if r.method not in METHODS:
        fail("run.method", f"must be one of {', '.join(METHODS)}")
    if r.epsilon_ms <= 0:
        fail("run.epsilon_ms", "must be positive")
    if r.max_iter < 1:
        fail("run.max_iter", "must be at least 1")
    if r.min_net_sync < 0:
        fail("run.min_net_sync_ms", "must be non-negative")
    if r.t_end <= 0:
        fail("run.t_end_s", "must be positive")
    times = [("events.generator_trips", x.at) for x in e.generator_trips]
    times += [("events.link_failures", x.at) for x in e.link_failures]
    if c.enabled:
        times.append(("control.probe_timestamp_s", c.probe_timestamp))
    for path, t in times:
        if t < 0:
            fail(path, "event time must be non-negative")
        if t >= r.t_end:
            fail(path, "event time must be before run.t_end_s")
