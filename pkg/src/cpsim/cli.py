"""Command-line front end: ``run``, ``bench`` and ``compare``.

Exit codes: 0 ok, 2 configuration error, 3 not converged, 4 simulation fault.
"""

from __future__ import annotations

import argparse
import csv
import gc
import json
import statistics
import sys
from pathlib import Path
from typing import Optional, Sequence

import yaml

from .config import ConfigError, ScenarioConfig, config_to_dict, dump_config, parse_config, read_config
from .desim import NS_PER_MS
from .orchestrate import (NotConverged, RunReport, Scenario, ScenarioMismatch, compare_arrivals,
                          compare_reports, cosim_simulate, self_consistent_simulate)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NOT_CONVERGED = 3
EXIT_FAULT = 4

METHODS = ("self_consistent", "cosim")


# -- config loading -------------------------------------------------------------------

def apply_overrides(cfg: ScenarioConfig, assignments: Sequence[str]) -> ScenarioConfig:
    """Apply ``section.key=value`` assignments using the YAML key names (and their units)."""
    if not assignments:
        return cfg
    raw = config_to_dict(cfg)
    for item in assignments:
        path, eq, value = item.partition("=")
        section, _, key = path.partition(".")
        if not eq or not key or section not in raw or not isinstance(raw[section], dict):
            raise ConfigError(path, f"bad override {item!r}; expected section.key=value")
        raw[section][key] = yaml.safe_load(value)
    return parse_config(yaml.safe_dump(raw, sort_keys=False))


def load_scenario(path: str, overrides: Sequence[str] = ()) -> Scenario:
    return Scenario.from_config(apply_overrides(read_config(path), overrides))


# -- artifact writers -----------------------------------------------------------------

def _csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_trajectory(path: Path, report: RunReport, buses: Sequence[int]) -> None:
    tr = report.trajectory
    rows = []
    for t, vm, va, f in zip(tr.sample_t, tr.v_mag, tr.theta, tr.freq):
        for i, bus in enumerate(buses):
            rows.append((t, bus, repr(float(vm[i])), repr(float(va[i])), repr(float(f[i]))))
    _csv(path, ["t_ns", "bus", "V_pu", "theta_rad", "f_hz"], rows)


def write_grid_steps(path: Path, report: RunReport) -> None:
    tr = report.trajectory
    rows = ((t, repr(a), repr(b), repr(c)) for t, a, b, c in zip(tr.step_t, tr.f_min, tr.f_mean, tr.f_coi))
    _csv(path, ["t_ns", "f_min_hz", "f_mean_hz", "f_coi_hz"], rows)


def write_spdc_arrivals(path: Path, report: RunReport) -> None:
    rows = []
    for bus, pts in sorted(report.measurement_delays().items()):
        for tau, t in pts:
            rows.append((bus, tau, t, (t - tau) / NS_PER_MS))
    _csv(path, ["source_bus", "meas_timestamp_ns", "arrival_ns", "delay_ms"], rows)


def write_commands(path: Path, report: RunReport) -> None:
    rows = []
    for bus, arr in sorted(report.arrivals.items()):
        seen = {idx: t for idx, _, t in (report.perceived or {}).get(bus, [])}
        for idx, tau, t in arr:
            rows.append((bus, idx, tau, t, seen.get(idx, "")))
    _csv(path, ["load_bus", "threshold_index", "meas_timestamp_ns", "arrival_ns", "perceived_ns"], rows)


def write_run_artifacts(out: Path, scenario: Scenario, report: RunReport) -> list[Path]:
    """Write every artifact of one method's run into ``out``; returns the files written."""
    out.mkdir(parents=True, exist_ok=True)
    files = []

    def target(name: str) -> Path:
        files.append(out / name)
        return out / name

    write_trajectory(target("trajectory.csv"), report, scenario.case.bus_ids)
    write_grid_steps(target("grid_steps.csv"), report)
    write_spdc_arrivals(target("spdc_arrivals.csv"), report)
    write_commands(target("commands.csv"), report)
    for i, trace in enumerate(report.traces):
        with open(target(f"delay_trace_{i}.csv"), "w", newline="") as fh:
            trace.write_csv(fh)
    for dm in report.delay_models:
        with open(target(f"delay_model_{dm.iteration}.csv"), "w", newline="") as fh:
            dm.write_csv(fh)
    with open(target("app_log.csv"), "w", newline="") as fh:
        report.stack.log.write_csv(fh)
    target("report.json").write_text(report.to_json(timings=False) + "\n")
    target("timings.json").write_text(json.dumps(report.timings_ms, indent=2) + "\n")
    return files


def write_agreement(path: Path, sc: RunReport, co: RunReport, tolerance_ms: float) -> bool:
    exact = compare_reports(sc, co, tolerance_ms)
    seen = compare_arrivals(co.arrivals, co.perceived, tolerance_ms)
    rows = [(bus, idx, repr(d), repr(seen.deltas_ms[(bus, idx)])) for (bus, idx), d in exact.deltas_ms.items()]
    _csv(path, ["load_bus", "threshold_index", "cosim_minus_self_consistent_ms", "perceived_minus_exact_ms"],
         rows)
    return exact.passed


# -- commands --------------------------------------------------------------------------

def cmd_run(args) -> int:
    scenario = load_scenario(args.config, args.set)
    cfg = scenario.config
    method = args.method or cfg.run.method
    methods = METHODS if method == "both" else (method,)
    out = Path(args.out or cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scenario.yaml").write_text(dump_config(cfg))
    (out / "topology.csv").write_text(scenario.topology().to_csv())
    reports: dict[str, RunReport] = {}
    status = EXIT_OK
    for m in methods:
        if m == "self_consistent":
            try:
                report, conv = self_consistent_simulate(scenario)
            except NotConverged as exc:
                report, status = exc.report, EXIT_NOT_CONVERGED
                print(f"error: {exc}", file=sys.stderr)
        else:
            report = cosim_simulate(scenario)
        reports[m] = report
        write_run_artifacts(out / m, scenario, report)
        print(f"{m}: {len(report.triggers)} trigger(s), iterations={report.iterations}, "
              f"norms_ms={report.norms_ms}, sync_steps={report.sync_steps}, "
              f"wall={report.wall_clock_ms / 1e3:.2f}s")
    if len(reports) == 2:
        ok = write_agreement(out / "agreement.csv", reports["self_consistent"], reports["cosim"], args.tol_ms)
        print(f"agreement within {args.tol_ms} ms: {'pass' if ok else 'FAIL'}")
    return status


def _timed(scenario: Scenario, method: str, precision_ms: float) -> tuple[float, int]:
    # start from a quiet heap so neither method pays for collecting objects it did not create
    gc.collect()
    gc.freeze()
    try:
        if method == "self_consistent":
            report, _ = self_consistent_simulate(scenario, epsilon_ms=precision_ms)
            return report.wall_clock_ms / 1e3, report.iterations
        report = cosim_simulate(scenario, min_net_sync=round(precision_ms * NS_PER_MS))
        return report.wall_clock_ms / 1e3, report.sync_steps
    finally:
        gc.unfreeze()


def bench_rows(scenario: Scenario, precisions_ms: Sequence[float], reps: int) -> list[dict]:
    """Median wall clock per (method, precision); methods alternate within each repetition."""
    rows = []
    for p in precisions_ms:
        walls: dict[str, list[float]] = {m: [] for m in METHODS}
        counts: dict[str, int] = {}
        for rep in range(reps):
            order = METHODS if rep % 2 == 0 else METHODS[::-1]
            for method in order:
                wall, counts[method] = _timed(scenario, method, p)
                walls[method].append(wall)
        for method in METHODS:
            rows.append({
                "method": method,
                "time_precision_ms": p,
                "wall_clock_s": statistics.median(walls[method]),
                "iterations": counts[method] if method == "self_consistent" else "",
                "sync_steps": counts[method] if method == "cosim" else "",
                "reps": reps,
                "low_confidence": reps < 2,
            })
    return rows


def cmd_bench(args) -> int:
    scenario = load_scenario(args.config, args.set)
    precisions = [float(x) for x in args.precisions.split(",") if x.strip()]
    if not precisions or any(p <= 0 for p in precisions) or args.reps < 1:
        raise ConfigError("bench", "precisions must be positive and reps >= 1")
    rows = bench_rows(scenario, precisions, args.reps)
    out = Path(args.out or scenario.config.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    fields = list(rows[0])
    _csv(out / "bench.csv", fields, ([r[f] for f in fields] for r in rows))
    for r in rows:
        count = r["iterations"] if r["method"] == "self_consistent" else r["sync_steps"]
        print(f"{r['method']:<16} {r['time_precision_ms']:>6g} ms  {r['wall_clock_s']:7.3f} s  {count}")
    return EXIT_OK


def cmd_compare(args) -> int:
    a = RunReport.from_dict(json.loads(Path(args.a).read_text()))
    b = RunReport.from_dict(json.loads(Path(args.b).read_text()))
    if args.perceived:
        if b.perceived is None:
            raise ScenarioMismatch(f"{args.b} has no perceived arrivals")
        c = compare_arrivals(b.arrivals, b.perceived, args.tol_ms)
    else:
        c = compare_reports(a, b, args.tol_ms)
    for (bus, idx), d in c.deltas_ms.items():
        print(f"load {bus:>2} command {idx}: {d:+.6f} ms")
    print(f"max |delta| = {c.max_abs_ms:.6f} ms, tolerance {args.tol_ms} ms: {'pass' if c.passed else 'FAIL'}")
    return EXIT_OK if c.passed else 1


# -- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cpsim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario and write its artifacts")
    r.add_argument("--config", required=True, help="scenario YAML (or the name of a shipped one)")
    r.add_argument("--method", choices=METHODS + ("both",))
    r.add_argument("--out", help="output directory (default: run.output_dir)")
    r.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    r.add_argument("--tol-ms", type=float, default=0.02, help="agreement tolerance when both methods run")
    r.set_defaults(fn=cmd_run)

    b = sub.add_parser("bench", help="wall-clock table of both methods")
    b.add_argument("--config", required=True)
    b.add_argument("--precisions", default="10,1", help="comma-separated time precisions in ms")
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--out")
    b.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    b.set_defaults(fn=cmd_bench)

    c = sub.add_parser("compare", help="per-load command arrival deltas between two report.json files")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--tol-ms", type=float, default=0.02)
    c.add_argument("--perceived", action="store_true", help="compare b's perceived against its exact arrivals")
    c.set_defaults(fn=cmd_compare)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ScenarioMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # simulation fault: surface it verbatim
        print(f"simulation fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
