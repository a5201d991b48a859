"""Command line front end.

Subcommands:
  run      simulate a scenario, write telemetry CSV and a lap report
  plot     render a telemetry CSV to SVG
  trims    build or inspect a steady-state trim library
  bench    QP solver scaling table over horizon lengths
  dp-demo  run the corridor planner once on a scenario and print the result
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import qp as qpmod
from .corridor import build_grid, extract_corridor, solve_dp
from .plots import emit_plots
from .sim import (Scenario, load_scenario, load_telemetry, run,
                  save_telemetry, timing_report)
from .steady_state import TrimLibrary, build_trim_library
from .track import TrackGeometry, make_default_track, project_pwl
from .vehicle import ModelParams, load_params


def _load_common(args):
    track = TrackGeometry.load(args.track) if getattr(args, "track", None) \
        else make_default_track()
    params = load_params(args.params) if getattr(args, "params", None) \
        else ModelParams()
    return track, params


def _scenario_from_args(args) -> Scenario:
    if args.scenario:
        scn = load_scenario(args.scenario)
        if args.controller:
            from dataclasses import replace
            scn = replace(scn, controller=args.controller)
        return scn
    track, params = _load_common(args)
    return Scenario(controller=args.controller or "mpcc", laps=args.laps,
                    seed=args.seed, track=track, params=params,
                    max_time=args.max_time)


def cmd_run(args) -> int:
    scn = _scenario_from_args(args)
    t0 = time.perf_counter()
    result = run(scn)
    wall = time.perf_counter() - t0
    save_telemetry(result.telemetry, args.out)
    print(f"wrote {args.out} ({len(result.telemetry)} steps, "
          f"{wall:.1f} s wall)")
    for rep in result.laps:
        print(f"lap {rep.lap}: {rep.lap_time:.3f} s  "
              f"speed [{rep.min_speed:.2f}, {rep.max_speed:.2f}] m/s  "
              f"max slack {rep.max_slack:.2e}  "
              f"deadline misses {rep.missed_deadlines}")
    if result.crashed:
        print(f"CRASHED at t = {result.crash_time:.2f} s")
    elif len(result.laps) < scn.laps:
        print(f"time limit reached after {len(result.laps)} laps")
    else:
        print(f"mean lap time {result.mean_lap_time():.3f} s")
    if len(result.telemetry) >= 100:
        rep = timing_report(result.telemetry, scn.Ts)
        print(f"solve time mean {rep['qp_solve']['mean']:.2f} ms, "
              f"max {rep['qp_solve']['max']:.2f} ms, "
              f"miss fraction {rep['deadline_miss_fraction']:.3f}")
    if args.plot_dir:
        track = scn.track if scn.track is not None else make_default_track()
        files = emit_plots(result.telemetry, track, args.plot_dir,
                           obstacles=scn.obstacles)
        print("plots: " + ", ".join(files))
    return 1 if result.crashed else 0


def cmd_plot(args) -> int:
    telemetry = load_telemetry(args.telemetry)
    obstacles = ()
    if args.scenario:
        scn = load_scenario(args.scenario)
        track = scn.track if scn.track is not None else make_default_track()
        obstacles = scn.obstacles
    else:
        track = TrackGeometry.load(args.track) if args.track \
            else make_default_track()
    files = emit_plots(telemetry, track, args.out, obstacles=obstacles)
    print("wrote " + ", ".join(files))
    return 0


def cmd_trims(args) -> int:
    if args.load:
        lib = TrimLibrary.load(args.load)
    else:
        params = load_params(args.params) if args.params else ModelParams()
        lib = build_trim_library(params)
    if args.out:
        lib.save(args.out)
        print(f"wrote {args.out}")
    print(f"{len(lib)} trims ({lib.n_drift} drifting), "
          f"params hash {lib.params_hash}")
    for vx in lib.vx_levels():
        group = lib.at_vx(vx)
        drift = sum(1 for t in group if t.region.name == "OVERSTEER")
        deltas = ", ".join(f"{t.delta_bar:+.3f}" for t in group)
        print(f"  vx {vx:4.2f}: {len(group):2d} trims ({drift} drift)  "
              f"delta [{deltas}]")
    return 0


def _bench_template(N: int) -> qpmod.MultistageQP:
    """Double-integrator tracking QP with box and soft constraints."""
    rng = np.random.default_rng(7)
    A = np.array([[1.0, 0.1], [0.0, 1.0]])
    B = np.array([[0.005], [0.1]])
    stages = []
    for k in range(N + 1):
        nu = 1 if k < N else 0
        Cx = np.vstack([np.eye(2), -np.eye(2)])
        e = np.full(4, 2.0)
        soft = np.array([True, True, False, False])
        stages.append(qpmod.QPStage(
            Q=np.diag([2.0, 1.0]), R=0.1 * np.eye(nu),
            S=np.zeros((nu, 2)), q=rng.normal(0, 0.1, 2), r=np.zeros(nu),
            A=A if k < N else None, B=B if k < N else None,
            c=np.zeros(2) if k < N else None,
            Cx=Cx, Cu=np.zeros((4, nu)), e=e, soft=soft))
    return qpmod.MultistageQP(stages, np.array([1.0, 0.0]))


def cmd_bench(args) -> int:
    horizons = [int(h) for h in args.horizons.split(",")]
    table = qpmod.benchmark_scaling(_bench_template, horizons=horizons,
                                    reps=args.reps)
    print(f"{'N':>6}  {'mean solve [ms]':>16}")
    for N, t in zip(table["horizons"], table["mean_times"]):
        print(f"{N:>6}  {1e3 * t:>16.3f}")
    print(f"linear fit: {1e3 * table['slope']:.4f} ms per stage, "
          f"R^2 = {table['r2']:.4f}")
    return 0


def cmd_dp_demo(args) -> int:
    scn = load_scenario(args.scenario) if args.scenario else Scenario()
    track = scn.track if scn.track is not None else make_default_track()
    sp = track.spline
    theta0 = scn.start_theta
    ths = theta0 + args.step * np.arange(args.layers)
    predicted = sp.position(ths)
    grid = build_grid(predicted, track, scn.obstacles)
    plan = solve_dp(grid, np.zeros(grid.n_layers))
    centers, widths = extract_corridor(plan, track)
    print(f"{len(scn.obstacles)} obstacles, {grid.n_layers} layers x "
          f"{grid.n_lateral} lateral nodes")
    print(f"{'theta':>8}  {'offset':>8}  {'center':>8}  {'width':>8}")
    for th, off, c, w in zip(grid.theta, plan.offsets, centers, widths):
        print(f"{th:8.3f}  {off:+8.3f}  {c:+8.3f}  {w:8.3f}")
    if args.out:
        from .sim import TELEMETRY_COLUMNS  # noqa: F401  (format doc lives there)
        pos = plan.positions
        fake = [{"X": p[0], "Y": p[1], "vx": 0.0, "vy": 0.0} for p in pos]
        files = emit_plots(fake, track, args.out, obstacles=scn.obstacles)
        print("wrote " + ", ".join(files))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="rcracer",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate a scenario")
    p.add_argument("--scenario", help="scenario file")
    p.add_argument("--controller", choices=["mpcc", "hrhc"])
    p.add_argument("--laps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-time", type=float, default=90.0)
    p.add_argument("--track", help="track file")
    p.add_argument("--params", help="model parameter file")
    p.add_argument("--out", default="telemetry.csv")
    p.add_argument("--plot-dir", help="also write SVG plots here")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("plot", help="render telemetry to SVG")
    p.add_argument("telemetry")
    p.add_argument("--track")
    p.add_argument("--scenario", help="scenario file (for obstacles)")
    p.add_argument("--out", default="plots")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("trims", help="build or inspect a trim library")
    p.add_argument("--params")
    p.add_argument("--load", help="inspect an existing library file")
    p.add_argument("--out", help="write the library here")
    p.set_defaults(func=cmd_trims)

    p = sub.add_parser("bench", help="solver scaling over horizon length")
    p.add_argument("--horizons", default="10,20,40,80")
    p.add_argument("--reps", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("dp-demo", help="corridor planner demo")
    p.add_argument("--scenario")
    p.add_argument("--layers", type=int, default=15)
    p.add_argument("--step", type=float, default=0.06)
    p.add_argument("--out", help="write an SVG of the planned path here")
    p.set_defaults(func=cmd_dp_demo)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
