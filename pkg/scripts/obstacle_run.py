"""Obstacle avoidance demo: five obstacles, both controllers.

Uses the packaged obstacle scenario and reports minimal clearance between
the driven trajectory and each obstacle footprint.
"""

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

import numpy as np

from rcracer.plots import emit_plots
from rcracer.sim import load_scenario, run, save_telemetry
from rcracer.track import make_default_track

DATA = pathlib.Path(__file__).resolve().parents[1] / "src" / "rcracer" / "data"
OUT = pathlib.Path(__file__).resolve().parents[1] / "out" / "obstacles"


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    base = load_scenario(DATA / "scenario_obstacles.txt")
    track = base.track if base.track is not None else make_default_track()
    for name in ("mpcc", "hrhc"):
        from dataclasses import replace
        scn = replace(base, controller=name)
        res = run(scn)
        save_telemetry(res.telemetry, OUT / f"{name}_telemetry.csv")
        emit_plots(res.telemetry, track, OUT / name, obstacles=scn.obstacles)
        clear = min(
            float(np.hypot(r.state[0] - ob.x, r.state[1] - ob.y)) - ob.radius
            for r in res.telemetry for ob in scn.obstacles)
        status = "crashed" if res.crashed else f"{len(res.laps)} laps"
        laps = ", ".join(f"{l.lap_time:.2f}" for l in res.laps)
        print(f"{name}: {status} [{laps}]  min clearance {clear:.3f} m")


if __name__ == "__main__":
    main()
