import dataclasses

import pytest
from hypothesis import given, settings, strategies as st

from cpsim.config import (ConfigError, ControlConfig, EventConfig, GeneratorTripSpec, GridConfig,
                          HostConfig, LinkFailureSpec, NetConfig, RunConfig, ScenarioConfig, dump_config,
                          parse_config, read_config, write_config)

T_END = 10**10
ns = st.integers(0, T_END - 1)
pos = st.floats(0.01, 1e3, allow_nan=False)


@st.composite
def configs(draw):
    th = draw(st.lists(st.floats(40.0, 60.0, allow_nan=False), min_size=1, max_size=4, unique=True))
    pdcs = tuple(draw(st.lists(st.integers(1, 39), min_size=1, max_size=4, unique=True)))
    zones = draw(st.one_of(st.none(), st.just({pdcs[0]: (40, 41)})))
    return ScenarioConfig(
        name=draw(st.text("abcxyz019_", min_size=1, max_size=8)),
        grid=GridConfig(inertia_scale=draw(pos), inertia_h_s=draw(st.dictionaries(st.integers(1, 10), pos,
                                                                                     max_size=2)),
                        droop_pu=draw(st.one_of(st.none(), pos)), governor_tg_s=draw(st.one_of(st.none(), pos)),
                        frequency_filter_s=draw(st.one_of(st.none(), st.floats(0, 1))),
                        step=draw(st.integers(1, 10**8))),
        network=NetConfig(bandwidth_bps=draw(st.integers(1, 10**10)), packet_size_bytes=draw(st.integers(1, 9000)),
                          refractive_index=draw(pos), ohm_per_km=draw(pos)),
        hosts=HostConfig(pmu_rate_hz=draw(st.integers(1, 120)), pdc_buses=pdcs, spdc_bus=draw(st.integers(1, 39)),
                         pdc_zones=zones,
                         load_buses=draw(st.one_of(st.none(), st.tuples(st.integers(1, 39)))),
                         pdc_max_wait=draw(st.integers(1, 10**9)), spdc_max_wait=draw(st.integers(1, 10**9))),
        control=ControlConfig(enabled=draw(st.booleans()), thresholds_hz=tuple(sorted(th, reverse=True)),
                              reduction_fraction=draw(st.floats(0.001, 0.999)), probe_timestamp=draw(ns)),
        events=EventConfig(
            generator_trips=tuple(GeneratorTripSpec(g, t) for g, t in draw(st.lists(st.tuples(
                st.integers(1, 10), ns), max_size=2))),
            link_failures=tuple(LinkFailureSpec(a, b, t) for a, b, t in draw(st.lists(st.tuples(
                st.integers(1, 39), st.integers(1, 39), ns), max_size=2)))),
        run=RunConfig(method=draw(st.sampled_from(["self_consistent", "cosim", "both"])),
                      epsilon_ms=draw(pos), max_iter=draw(st.integers(1, 50)),
                      min_net_sync=draw(st.integers(0, 10**8)), t_end=T_END,
                      output_dir=draw(st.sampled_from(["out", "out/x"])), seed=draw(st.integers(0, 99))),
    )


@settings(max_examples=150, deadline=None)
@given(configs())
def test_round_trip_field_for_field(cfg):
    assert parse_config(dump_config(cfg)) == cfg


@pytest.mark.parametrize("name", ["c1", "c2", "m1"])
def test_shipped_scenarios_round_trip(name, tmp_path):
    cfg = read_config(name)
    write_config(cfg, tmp_path / "x.yaml")
    assert read_config(tmp_path / "x.yaml") == cfg


def test_shipped_values():
    c1, c2, m1 = (read_config(n) for n in ("c1", "c2", "m1"))
    assert (c1.network.bandwidth_bps, c2.network.bandwidth_bps) == (800_000, 1_600_000)
    assert c1.control.thresholds_hz == (49.96, 49.92, 49.88)
    assert c1.hosts.pdc_max_wait == c1.hosts.spdc_max_wait == 100_000_000
    assert c1.events.generator_trips == (GeneratorTripSpec(3, 1_000_000_000),)
    assert not m1.control.enabled
    assert m1.events.link_failures == (LinkFailureSpec(16, 17, 6_000_000_000),)
    assert m1.run.t_end == 10_000_000_000


def bad(text_replace):
    src = dump_config(read_config("c1"))
    old, new = text_replace
    assert old in src
    return src.replace(old, new)


@pytest.mark.parametrize("edit,field", [
    (("thresholds_hz:\n  - 49.96\n  - 49.92", "thresholds_hz:\n  - 49.92\n  - 49.96"), "control.thresholds_hz"),
    (("bandwidth_bps: 800000", "bandwidth_bps: 0"), "network.bandwidth_bps"),
    (("t_end_s: 5.0", "t_end_s: 0.9"), "events.generator_trips"),
    (("method: both", "method: magic"), "run.method"),
    (("reduction_fraction: 0.02", "reduction_fraction: 1.5"), "control.reduction_fraction"),
])
def test_errors_name_field_and_line(edit, field):
    text = bad(edit)
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.field == field
    line = info.value.line
    assert line is not None
    assert field.split(".")[-1].split("_s")[0][:8] in text.splitlines()[line - 1]


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        parse_config(bad(("seed: 0", "seed: 0\n  colour: red")))


def test_overrides_validate():
    cfg = read_config("c1")
    assert cfg.with_overrides(**{"network.bandwidth_bps": 1_600_000}).network.bandwidth_bps == 1_600_000
    with pytest.raises(ConfigError):
        cfg.with_overrides(**{"run.t_end": 10})
    assert dataclasses.replace(cfg) == cfg


def test_missing_file():
    with pytest.raises(ConfigError):
        read_config("/nonexistent/nothing.yaml")
