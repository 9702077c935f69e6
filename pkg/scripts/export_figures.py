"""Export plot-ready CSVs for one scenario.

* ``delay_pdfs.csv``: mean delay per command (or measurement) path and trigger timestamp, per iteration
* ``frequency.csv``: minimum bus frequency over time with control (both methods) and without it
* ``spdc_arrivals.csv``: arrival time of every aggregated measurement at the SPDC (self-consistent run)

    python3 scripts/export_figures.py c1 --out out/figures/c1
"""

import argparse
import csv
from dataclasses import replace
from pathlib import Path

from cpsim.config import read_config
from cpsim.desim import NS_PER_MS
from cpsim.orchestrate import Scenario, cosim_simulate, self_consistent_simulate


def write(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    print(f"wrote {path}")


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config", help="scenario YAML or shipped scenario name")
    p.add_argument("--out", default=None)
    args = p.parse_args()

    cfg = read_config(args.config)
    out = Path(args.out or Path("out") / "figures" / cfg.name)
    out.mkdir(parents=True, exist_ok=True)
    scenario = Scenario.from_config(cfg)
    sc, _ = self_consistent_simulate(scenario)
    co = cosim_simulate(scenario)

    rows = []
    for dm in sc.delay_models:
        for (src, dst), per_tau in sorted(dm.entries.items()):
            if (src, dst) not in scenario.paths_of_interest:
                continue
            for tau in sorted(per_tau):
                rows.append((dm.iteration, src, dst, tau, dm.mean((src, dst), tau) / NS_PER_MS))
    write(out / "delay_pdfs.csv", ["iteration", "src", "dst", "trigger_timestamp_ns", "mean_delay_ms"], rows)

    series = {"self_consistent": sc.trajectory, "cosim": co.trajectory}
    if scenario.control:
        off = Scenario.from_config(replace(cfg, control=replace(cfg.control, enabled=False)))
        series["no_control"] = self_consistent_simulate(off)[0].trajectory
    rows = []
    for name, tr in series.items():
        rows.extend((name, t, f) for t, f in zip(tr.step_t, tr.f_min))
    write(out / "frequency.csv", ["run", "t_ns", "f_min_hz"], rows)

    rows = [(bus, tau, t, (t - tau) / NS_PER_MS)
            for bus, pts in sorted(sc.measurement_delays().items()) for tau, t in pts]
    write(out / "spdc_arrivals.csv", ["source_bus", "meas_timestamp_ns", "arrival_ns", "delay_ms"], rows)


if __name__ == "__main__":
    main()
