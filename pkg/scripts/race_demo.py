"""Run both controllers for three laps and compare lap times.

Writes telemetry and trajectory SVGs under out/race_demo/.
"""

import pathlib
import sys
import time

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from rcracer.plots import emit_plots
from rcracer.sim import Scenario, run, save_telemetry, timing_report
from rcracer.track import make_default_track

OUT = pathlib.Path(__file__).resolve().parents[1] / "out" / "race_demo"


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    track = make_default_track()
    results = {}
    for name in ("hrhc", "mpcc"):
        scn = Scenario(controller=name, laps=3)
        t0 = time.perf_counter()
        res = run(scn)
        wall = time.perf_counter() - t0
        results[name] = res
        save_telemetry(res.telemetry, OUT / f"{name}_telemetry.csv")
        emit_plots(res.telemetry, track, OUT / name)
        print(f"\n{name.upper()}  ({wall:.0f} s wall)")
        for rep in res.laps:
            print(f"  lap {rep.lap}: {rep.lap_time:.3f} s  "
                  f"top speed {rep.max_speed:.2f} m/s  "
                  f"max slack {rep.max_slack:.1e}")
        if res.crashed:
            print(f"  crashed at t = {res.crash_time:.2f} s")
        rep = timing_report(res.telemetry, scn.Ts)
        print(f"  qp solve {rep['qp_solve']['mean']:.1f} ms mean, "
              f"{rep['qp_solve']['max']:.1f} ms max")

    if all(r.laps for r in results.values()):
        print(f"\nmean lap: mpcc {results['mpcc'].mean_lap_time():.3f} s, "
              f"hrhc {results['hrhc'].mean_lap_time():.3f} s")


if __name__ == "__main__":
    main()
