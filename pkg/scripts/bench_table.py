"""Wall-clock table for both methods across time precisions (median over repetitions).

    python3 scripts/bench_table.py c1 --precisions 10,1 --reps 5
"""

import argparse

from cpsim.cli import bench_rows, load_scenario


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config")
    p.add_argument("--precisions", default="10,1")
    p.add_argument("--reps", type=int, default=3)
    args = p.parse_args()

    rows = bench_rows(load_scenario(args.config), [float(x) for x in args.precisions.split(",")], args.reps)
    print(f"{'precision':>9}  {'self-consistent':>15}  {'co-simulation':>13}  ratio")
    for p_ms in sorted({r["time_precision_ms"] for r in rows}, reverse=True):
        by = {r["method"]: r for r in rows if r["time_precision_ms"] == p_ms}
        sc, co = by["self_consistent"], by["cosim"]
        print(f"{p_ms:>7g}ms  {sc['wall_clock_s']:>9.2f} s ({sc['iterations']} it)  "
              f"{co['wall_clock_s']:>7.2f} s ({co['sync_steps']} syncs)  "
              f"{co['wall_clock_s'] / sc['wall_clock_s']:.2f}")


if __name__ == "__main__":
    main()
