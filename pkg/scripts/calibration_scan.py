"""Sweep machine and governor constants for the generator-trip run without control.

Prints the 49 Hz crossing delay after the trip (minimum and mean bus frequency) and the nadir for
every combination; this is how the shipped grid calibration was chosen.

    python3 scripts/calibration_scan.py --h39 5 --scale 0.5,0.6,0.7 --droop 0.15 --tg 15
"""

import argparse
import itertools
import time

from cpsim.gridsim import GeneratorTrip, GridEvent, init_steady_state, integrate, load_case
from cpsim.gridsim.case import calibrated, default_case_path, read_case

TRIP_AT = 1_000_000_000


def floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",")]


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--h39", type=floats, default=[5.0], help="inertia (s) of the bus-39 equivalent machine")
    p.add_argument("--scale", type=floats, default=[0.6], help="inertia scale applied to every machine")
    p.add_argument("--droop", type=floats, default=[0.15], help="governor droop (pu)")
    p.add_argument("--tg", type=floats, default=[15.0], help="governor time constant (s)")
    p.add_argument("--gen", type=int, default=3, help="generator to trip at 1 s")
    p.add_argument("--t-end", type=float, default=5.0)
    args = p.parse_args()

    base = read_case(default_case_path())
    print("h39  scale  droop  tg  cross_min_s  cross_mean_s  nadir_hz  wall_s")
    for h39, scale, droop, tg in itertools.product(args.h39, args.scale, args.droop, args.tg):
        model = load_case(calibrated(base, inertia_h_s={10: h39}, inertia_scale=scale,
                                     droop_pu=droop, governor_tg_s=tg))
        t0 = time.perf_counter()
        tr = integrate(model, init_steady_state(model), round(args.t_end * 1e9),
                       [GridEvent(TRIP_AT, GeneratorTrip(args.gen))])
        cross = [tr.crossing_time(49.0, s) for s in ("f_min", "f_mean")]
        cross = ["-" if c is None else f"{c - TRIP_AT / 1e9:.3f}" for c in cross]
        print(f"{h39:g}  {scale:g}  {droop:g}  {tg:g}  {cross[0]}  {cross[1]}  {tr.nadir():.3f}  "
              f"{time.perf_counter() - t0:.2f}", flush=True)


if __name__ == "__main__":
    main()
