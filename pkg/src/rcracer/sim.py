"""Closed-loop simulation harness: scenarios, telemetry, lap timing.

The plant is the nonlinear model integrated at 1 ms substeps; the
controller runs every Ts with a one-period actuation delay (the input
computed from the measurement at step k is applied over slot k+1).
Everything is driven by a Scenario, and a fixed seed makes runs
bit-reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .corridor import CorridorError, Obstacle, build_grid, extract_corridor, solve_dp
from .hrhc import HrhcConfig, HrhcController
from .mpcc import MpccConfig, MpccController
from .steady_state import TrimLibrary, build_trim_library
from .track import TrackGeometry, make_default_track, project_pwl, signed_lateral_offset
from .vehicle import (ControlInput, ModelDomainError, ModelParams,
                      VehicleState, integrate, load_params)

CAR_WIDTH = 0.05
# extra footprint inflation used only while planning corridors; the
# controllers track the corridor with centimeter-level error, so the
# planned gap edges must not touch the real footprints
CORRIDOR_INFLATION = 0.03
# the corridor grid always covers at least this distance ahead, so slow
# driving (notably the standing start) still sees obstacles in time to brake
CORRIDOR_LOOKAHEAD = 1.2
PLANT_SUBSTEP = 1e-3

TELEMETRY_COLUMNS = [
    "step", "t", "X", "Y", "phi", "vx", "vy", "omega", "d", "delta",
    "applied_d", "applied_delta", "theta", "lap", "slack",
    "planner_feasible", "qp_status", "qp_iters",
    "t_plan_ms", "t_border_ms", "t_qpgen_ms", "t_qpsolve_ms", "t_total_ms",
]


@dataclass(frozen=True)
class Scenario:
    controller: str = "mpcc"              # "mpcc" or "hrhc"
    laps: int = 3
    seed: int = 0
    Ts: float = 0.02
    track: TrackGeometry | None = None    # default track when None
    params: ModelParams | None = None
    obstacles: tuple = ()
    noise_std: tuple = (0.0, 0.0, 0.0)    # position [m], angle [rad], velocity
    mismatch: float = 0.0                 # relative plant-vs-controller param skew
    start_theta: float = 0.0
    start_speed: float = 0.3
    max_time: float = 90.0
    hrhc: HrhcConfig = field(default_factory=HrhcConfig)
    mpcc: MpccConfig = field(default_factory=MpccConfig)
    delay_compensation: bool = True

    def __post_init__(self):
        if self.controller not in ("mpcc", "hrhc"):
            raise ValueError("controller must be 'mpcc' or 'hrhc'")
        if self.laps < 1 or self.Ts <= 0:
            raise ValueError("invalid scenario timing")


@dataclass
class TelemetryRecord:
    step: int
    t: float
    state: np.ndarray          # true plant state (6,)
    u: ControlInput            # computed this step
    applied: ControlInput      # active during this slot
    theta: float
    lap: int
    slack: float
    planner_feasible: bool
    qp_status: str
    qp_iters: int
    times: dict                # component -> seconds
    predicted: np.ndarray | None = None
    predicted_theta: np.ndarray | None = None
    corridor: tuple | None = None   # (theta, centers, widths)


@dataclass(frozen=True)
class LapReport:
    lap: int
    lap_time: float
    min_speed: float
    max_speed: float
    max_slack: float
    missed_deadlines: int


@dataclass
class SimResult:
    telemetry: list
    laps: list
    crashed: bool
    crash_time: float | None
    total_time: float

    def mean_lap_time(self) -> float:
        return float(np.mean([l.lap_time for l in self.laps])) if self.laps else float("inf")


def _perturbed(params: ModelParams, rel: float, rng: np.random.Generator) -> ModelParams:
    if rel == 0.0:
        return params
    fields_ = ("m", "Iz", "Bf", "Cf", "Df", "Br", "Cr_tire", "Dr",
               "Cm1", "Cm2", "Croll", "Cd")
    changes = {f: getattr(params, f) * (1.0 + rel * rng.uniform(-1, 1))
               for f in fields_}
    return replace(params, **changes)


def _make_controller(scn: Scenario, track, params, library):
    if scn.controller == "hrhc":
        return HrhcController(track, library, params, scn.hrhc)
    return MpccController(track, params, scn.mpcc)


def run(scenario: Scenario, library: TrimLibrary | None = None,
        keep_predictions: bool = False) -> SimResult:
    """Simulate the scenario; returns telemetry and per-lap reports."""
    scn = scenario
    track = scn.track if scn.track is not None else make_default_track()
    params = scn.params if scn.params is not None else ModelParams()
    rng = np.random.default_rng(scn.seed)
    plant_params = _perturbed(params, scn.mismatch, rng)
    if scn.controller == "hrhc" and library is None:
        library = build_trim_library(params)
    ctrl = _make_controller(scn, track, params, library)

    sp = track.spline
    L = track.length
    pos0 = sp.position(scn.start_theta)
    ang0 = float(sp.tangent_angle(scn.start_theta))
    state = VehicleState(pos0[0], pos0[1], ang0, max(scn.start_speed, 0.1), 0.0, 0.0)

    Ts = scn.Ts
    n_sub = max(1, int(round(Ts / PLANT_SUBSTEP)))
    applied = ControlInput(0.0, 0.0)
    telemetry = []
    lap_reports = []
    lap = 0
    lap_start_t = 0.0
    prev_theta = scn.start_theta
    lap_speeds = []
    lap_slacks = []
    lap_misses = 0
    off_track_since = None
    crashed = False
    crash_time = None
    corridor = None
    prev_plan = None

    n_steps = int(round(scn.max_time / Ts))
    noise = np.array([scn.noise_std[0], scn.noise_std[0], scn.noise_std[1],
                      scn.noise_std[2], scn.noise_std[2], scn.noise_std[2]])
    for k in range(n_steps):
        t = k * Ts
        meas_arr = state.as_array()
        if np.any(noise > 0):
            meas_arr = meas_arr + rng.normal(0.0, 1.0, 6) * noise
        meas = VehicleState.from_array(meas_arr)

        if scn.obstacles:
            inflated = tuple(Obstacle(o.x, o.y, o.radius + CORRIDOR_INFLATION)
                             for o in scn.obstacles)
            predicted = ctrl.predicted_positions()
            if predicted is None:
                horizon = scn.mpcc.N if scn.controller == "mpcc" else scn.hrhc.sel.N
                step_len = max(meas.vx, 0.5) * Ts
                theta_guess = project_pwl(track, meas.X, meas.Y)
                ths = theta_guess + step_len * np.arange(horizon + 1)
                predicted = sp.position(ths)
            th_first = project_pwl(track, predicted[0][0], predicted[0][1])
            th_last = project_pwl(track, predicted[-1][0], predicted[-1][1])
            span = float(np.mod(th_last - th_first, L))
            if span < CORRIDOR_LOOKAHEAD:
                n_extra = int(np.ceil((CORRIDOR_LOOKAHEAD - span) / 0.07))
                extra = sp.position(th_last + 0.07 * np.arange(1, n_extra + 1))
                predicted = np.vstack([np.atleast_2d(predicted), extra])
            try:
                grid = build_grid(predicted, track, inflated)
                if prev_plan is None:
                    prev_offsets = np.zeros(grid.n_layers)
                else:
                    prev_offsets = np.interp(
                        np.mod(grid.theta - grid.theta[0], L),
                        np.mod(prev_plan.grid.theta - prev_plan.grid.theta[0], L),
                        prev_plan.offsets)
                off_meas = signed_lateral_offset(track, meas.X, meas.Y)
                dp_plan = solve_dp(grid, prev_offsets, start=off_meas)
                centers, widths = extract_corridor(dp_plan, track)
                corridor = (grid.theta, centers, widths)
                prev_plan = dp_plan
            except CorridorError:
                pass  # keep the previous corridor

        u = ctrl.step(meas, corridor=corridor,
                      delay=(Ts if scn.delay_compensation else None))

        theta = project_pwl(track, state.X, state.Y)
        dtheta = theta - prev_theta
        if dtheta < -0.5 * L:
            # crossed the start line: close the lap with sub-step interpolation
            frac = (L - prev_theta) / (L - prev_theta + theta) \
                if (L - prev_theta + theta) > 0 else 0.0
            lap_time = t - lap_start_t + frac * Ts
            lap_reports.append(LapReport(
                lap=lap + 1, lap_time=lap_time,
                min_speed=float(np.min(lap_speeds)) if lap_speeds else 0.0,
                max_speed=float(np.max(lap_speeds)) if lap_speeds else 0.0,
                max_slack=float(np.max(lap_slacks)) if lap_slacks else 0.0,
                missed_deadlines=lap_misses))
            lap += 1
            lap_start_t = t + frac * Ts
            lap_speeds, lap_slacks, lap_misses = [], [], 0
        prev_theta = theta

        times = dict(ctrl.last_times)
        total = sum(times.values())
        times["total"] = total
        if total > Ts:
            lap_misses += 1
        slack = float(getattr(ctrl, "last_slack", 0.0))
        planner_ok = True
        if scn.controller == "hrhc" and ctrl.prev_plan is not None:
            planner_ok = ctrl.prev_plan.feasible
        qp = ctrl.last_solution
        rec = TelemetryRecord(
            step=k, t=t, state=state.as_array(), u=u, applied=applied,
            theta=theta, lap=lap, slack=slack, planner_feasible=planner_ok,
            qp_status=qp.status if qp else "none",
            qp_iters=qp.iterations if qp else 0, times=times,
            predicted=(ctrl.predicted_positions() if keep_predictions else None),
            predicted_theta=(getattr(ctrl, "predicted_progress", lambda: None)()
                             if keep_predictions else None),
            corridor=(corridor if keep_predictions else None))
        telemetry.append(rec)
        lap_speeds.append(float(np.hypot(state.vx, state.vy)))
        lap_slacks.append(slack)

        # plant update under the previously computed input (one-period delay)
        try:
            state = integrate(state, applied, Ts, substeps=n_sub,
                              params=plant_params)
        except ModelDomainError:
            # rolled to a stop: hold position at the minimum forward speed
            state = VehicleState(state.X, state.Y, state.phi,
                                 plant_params.vx_min, 0.0, 0.0)
        applied = u

        off = abs(signed_lateral_offset(track, state.X, state.Y))
        hw = float(track.half_width_at(project_pwl(track, state.X, state.Y)))
        if off > hw + CAR_WIDTH:
            if off_track_since is None:
                off_track_since = t
            elif t - off_track_since > 0.2:
                crashed = True
                crash_time = t
                break
        else:
            off_track_since = None
        if lap >= scn.laps:
            break

    return SimResult(telemetry=telemetry, laps=lap_reports, crashed=crashed,
                     crash_time=crash_time, total_time=len(telemetry) * Ts)


def timing_report(telemetry, Ts: float):
    """Per-component timing stats in milliseconds plus deadline-miss fraction."""
    if len(telemetry) < 100:
        raise ValueError("need at least 100 telemetry steps")
    comps = ["path_plan", "border_adjust", "qp_gen", "qp_solve", "total"]
    out = {}
    for c in comps:
        vals = 1e3 * np.array([rec.times.get(c, 0.0) for rec in telemetry])
        out[c] = {"mean": float(np.mean(vals)), "stdev": float(np.std(vals)),
                  "max": float(np.max(vals))}
    totals = np.array([rec.times.get("total", 0.0) for rec in telemetry])
    out["deadline_miss_fraction"] = float(np.mean(totals > Ts))
    return out


def save_telemetry(telemetry, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# rcracer telemetry v1\n")
        writer = csv.writer(fh)
        writer.writerow(TELEMETRY_COLUMNS)
        for r in telemetry:
            X, Y, phi, vx, vy, omega = r.state
            writer.writerow([
                r.step, f"{r.t:.6f}", f"{X:.9f}", f"{Y:.9f}", f"{phi:.9f}",
                f"{vx:.9f}", f"{vy:.9f}", f"{omega:.9f}",
                f"{r.u.d:.9f}", f"{r.u.delta:.9f}",
                f"{r.applied.d:.9f}", f"{r.applied.delta:.9f}",
                f"{r.theta:.9f}", r.lap, f"{r.slack:.9e}",
                int(r.planner_feasible), r.qp_status, r.qp_iters,
                f"{1e3 * r.times.get('path_plan', 0.0):.4f}",
                f"{1e3 * r.times.get('border_adjust', 0.0):.4f}",
                f"{1e3 * r.times.get('qp_gen', 0.0):.4f}",
                f"{1e3 * r.times.get('qp_solve', 0.0):.4f}",
                f"{1e3 * r.times.get('total', 0.0):.4f}",
            ])


def load_telemetry(path):
    """Rows back as dicts (numbers parsed); inverse of save_telemetry."""
    rows = []
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# rcracer telemetry v1"):
            raise ValueError("not a telemetry file")
        reader = csv.DictReader(fh)
        for row in reader:
            parsed = {}
            for key, val in row.items():
                if key in ("qp_status",):
                    parsed[key] = val
                elif key in ("step", "lap", "qp_iters", "planner_feasible"):
                    parsed[key] = int(val)
                else:
                    parsed[key] = float(val)
            rows.append(parsed)
    return rows


# --- scenario files -------------------------------------------------------

def save_scenario(scn: Scenario, path, track_file=None, params_file=None) -> None:
    lines = ["# rcracer scenario v1",
             f"controller = {scn.controller}",
             f"laps = {scn.laps}",
             f"seed = {scn.seed}",
             f"Ts = {scn.Ts}",
             f"start_theta = {scn.start_theta}",
             f"start_speed = {scn.start_speed}",
             f"max_time = {scn.max_time}",
             f"mismatch = {scn.mismatch}",
             f"noise_std = {scn.noise_std[0]} {scn.noise_std[1]} {scn.noise_std[2]}",
             f"delay_compensation = {int(scn.delay_compensation)}"]
    if track_file:
        lines.append(f"track = {track_file}")
    if params_file:
        lines.append(f"params = {params_file}")
    for ob in scn.obstacles:
        lines.append(f"obstacle = {ob.x} {ob.y} {ob.radius}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_scenario(path) -> Scenario:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# rcracer scenario v1"):
        raise ValueError("not a scenario file")
    kw = {}
    obstacles = []
    base = Path(path).parent
    for ln in lines[1:]:
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        key, val = (s.strip() for s in ln.split("=", 1))
        if key == "obstacle":
            x, y, r = (float(v) for v in val.split())
            obstacles.append(Obstacle(x, y, r))
        elif key == "track":
            kw["track"] = TrackGeometry.load(base / val if not Path(val).is_absolute() else val)
        elif key == "params":
            kw["params"] = load_params(base / val if not Path(val).is_absolute() else val)
        elif key == "noise_std":
            kw["noise_std"] = tuple(float(v) for v in val.split())
        elif key in ("laps", "seed"):
            kw[key] = int(val)
        elif key == "delay_compensation":
            kw[key] = bool(int(val))
        elif key == "controller":
            kw[key] = val
        else:
            kw[key] = float(val)
    return Scenario(obstacles=tuple(obstacles), **kw)


__all__ = [
    "Scenario", "TelemetryRecord", "LapReport", "SimResult", "run",
    "timing_report", "save_telemetry", "load_telemetry", "save_scenario",
    "load_scenario", "TELEMETRY_COLUMNS", "CAR_WIDTH",
]
