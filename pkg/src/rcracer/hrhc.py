"""Hierarchical receding-horizon controller.

Upper level: enumerate library trims close to the measured velocity,
roll each out kinematically over the horizon, keep the track-feasible
rollouts and pick the one with the largest progress. Lower level: a
tracking MPC that follows the winning rollout with an LTV model
linearized along the reference, soft corridor slabs and input boxes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import qp as qpmod
from .steady_state import Region, Trim, TrimLibrary
from .track import (TrackGeometry, corridor_bounds, corridor_halfspaces,
                    project_pwl, signed_lateral_offset)
from .vehicle import (ControlInput, ModelDomainError, ModelParams,
                      VehicleState, balancing_drive,
                      integrate, integrate_kinematic, linearize_discretize)


@dataclass(frozen=True)
class SelectionParams:
    """Thresholds for matching library trims against the measured velocity."""

    nu: float = 0.4          # |vy| above this marks a trim as drifting
    rho: float = 0.5         # speed window for regular trims
    sigma_x: float = 0.4     # drift windows per velocity component
    sigma_y: float = 0.5
    sigma_omega: float = 2.5
    N: int = 14
    Td: float = 0.025

    def __post_init__(self):
        for name in ("nu", "rho", "sigma_x", "sigma_y", "sigma_omega", "Td"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.N < 1:
            raise ValueError("horizon must be at least 1")


@dataclass(frozen=True)
class PlannedPath:
    trim: Trim
    poses: np.ndarray        # (N+1, 3) kinematic rollout X, Y, phi
    d_ref: float             # balancing drive for the trim speed
    theta_star: float        # progress of the final position along the track
    feasible: bool           # False when produced by the fallback


@dataclass(frozen=True)
class HrhcWeights:
    Q: np.ndarray = field(default_factory=lambda: np.array(
        [60.0, 60.0, 8.0, 4.0, 2.0, 0.5]))
    R: np.ndarray = field(default_factory=lambda: np.array([0.2, 1.0]))
    P: np.ndarray | None = None   # terminal weight, defaults to Q
    rho: float | None = None      # slab penalty, defaults to 1e3 * max(Q)

    def terminal(self) -> np.ndarray:
        return self.Q if self.P is None else self.P

    def penalty(self) -> float:
        return 1e3 * float(np.max(self.Q)) if self.rho is None else self.rho


@dataclass(frozen=True)
class HrhcConfig:
    sel: SelectionParams = field(default_factory=SelectionParams)
    weights: HrhcWeights = field(default_factory=HrhcWeights)
    margin: float = 0.08     # lateral clearance kept from borders / corridor


_corridor_lookup = corridor_bounds


def candidate_set(library: TrimLibrary, v_measured, sel: SelectionParams):
    """Trims whose stationary velocity is close to the measured one."""
    vx, vy, omega = v_measured
    out = []
    for t in library:
        if abs(t.vy_bar) <= sel.nu:
            if abs(vx - t.vx_bar) <= sel.rho:
                out.append(t)
        else:
            if (abs(vx - t.vx_bar) <= sel.sigma_x
                    and abs(vy - t.vy_bar) <= sel.sigma_y
                    and abs(omega - t.omega_bar) <= sel.sigma_omega):
                out.append(t)
    return out


def rollout(state: VehicleState, trim: Trim, sel: SelectionParams) -> np.ndarray:
    """Kinematic horizon rollout assuming the trim is reached in one step."""
    poses = np.zeros((sel.N + 1, 3))
    poses[0] = (state.X, state.Y, state.phi)
    v = trim.velocities()
    for k in range(sel.N):
        poses[k + 1] = integrate_kinematic(poses[k], v, sel.Td, substeps=2)
    return poses


def _path_violation(track, poses, center_fn, width_fn):
    """Worst lateral corridor violation over the rollout (<= 0 is feasible)."""
    worst = -np.inf
    for X, Y, _ in poses[1:]:
        theta = project_pwl(track, X, Y)
        off = signed_lateral_offset(track, X, Y, theta)
        worst = max(worst, abs(off - float(center_fn(theta))) - float(width_fn(theta)))
    return worst


def _progress(track, theta0, pose) -> float:
    L = track.length
    theta = project_pwl(track, pose[0], pose[1])
    return float(np.mod(theta - theta0, L))


def _trim_drive(trim: Trim, params: ModelParams | None) -> float:
    if params is None:
        return float("nan")
    return float(np.clip(balancing_drive(trim.vx_bar, params),
                         params.d_min, params.d_max))


def plan(track: TrackGeometry, state: VehicleState, library: TrimLibrary,
         sel: SelectionParams, corridor=None, margin: float = 0.04,
         params: ModelParams | None = None):
    """Pick the feasible candidate trim with maximal horizon progress."""
    center_fn, width_fn = _corridor_lookup(track, corridor, margin)
    theta0 = project_pwl(track, state.X, state.Y)
    cands = candidate_set(library, (state.vx, state.vy, state.omega), sel)
    # a narrow corridor ahead means an obstacle gap: shed speed early, the
    # tracking level cannot hold a fast swerve to within a few centimeters
    ahead = width_fn(theta0 + np.linspace(0.0, 1.0, 21))
    if float(np.min(ahead)) < 0.10:
        vmin = min((t.vx_bar for t in cands), default=None)
        if vmin is not None:
            cands = [t for t in cands if t.vx_bar <= vmin + 0.25 + 1e-9]
    best = None
    best_prog = -np.inf
    for trim in cands:
        poses = rollout(state, trim, sel)
        if _path_violation(track, poses, center_fn, width_fn) > 0.0:
            continue
        prog = _progress(track, theta0, poses[-1])
        if prog > best_prog:
            best_prog = prog
            best = (trim, poses)
    if best is None:
        return fallback(track, state, library, sel, corridor, margin, params)
    trim, poses = best
    return PlannedPath(trim=trim, poses=poses, d_ref=_trim_drive(trim, params),
                       theta_star=best_prog, feasible=True)


def fallback(track: TrackGeometry, state: VehicleState, library: TrimLibrary,
             sel: SelectionParams, corridor=None, margin: float = 0.04,
             params: ModelParams | None = None) -> PlannedPath:
    """Relaxed selection when no nominal candidate survives.

    First retry without drift trims and a doubled speed window; if still
    nothing is feasible, return the slowest trim minimizing the worst
    corridor violation.
    """
    center_fn, width_fn = _corridor_lookup(track, corridor, margin)
    theta0 = project_pwl(track, state.X, state.Y)
    relaxed = SelectionParams(nu=sel.nu, rho=2.0 * sel.rho, sigma_x=sel.sigma_x,
                              sigma_y=sel.sigma_y, sigma_omega=sel.sigma_omega,
                              N=sel.N, Td=sel.Td)
    cands = [t for t in candidate_set(library, (state.vx, state.vy, state.omega),
                                      relaxed) if t.region is not Region.OVERSTEER]
    best = None
    best_prog = -np.inf
    for trim in cands:
        poses = rollout(state, trim, sel)
        if _path_violation(track, poses, center_fn, width_fn) > 0.0:
            continue
        prog = _progress(track, theta0, poses[-1])
        if prog > best_prog:
            best_prog, best = prog, (trim, poses)
    if best is not None:
        trim, poses = best
        return PlannedPath(trim, poses, _trim_drive(trim, params), best_prog, True)

    # nothing fits: slowest trims, least violation of the true corridor
    # (no safety margin, so footprints are dodged before margins are)
    hard_center, hard_width = _corridor_lookup(track, corridor, 0.0)
    min_vx = min(t.vx_bar for t in library)
    slow = [t for t in library if t.vx_bar == min_vx and t.region is not Region.OVERSTEER]
    scored = []
    for trim in slow:
        poses = rollout(state, trim, sel)
        scored.append((_path_violation(track, poses, hard_center, hard_width), trim, poses))
    viol, trim, poses = min(scored, key=lambda s: s[0])
    return PlannedPath(trim, poses, _trim_drive(trim, params),
                       _progress(track, theta0, poses[-1]), False)


def build_tracking_qp(planned: PlannedPath, corridor_slabs, weights: HrhcWeights,
                      state: VehicleState, params: ModelParams,
                      Td: float) -> qpmod.MultistageQP:
    """Tracking QP in deviation coordinates around the planned rollout.

    `corridor_slabs` is a track.Corridor with one slab per stage (N+1).
    Slab rows are marked soft; input boxes are hard. Variables per stage
    after slack lowering: 6 states + 2 inputs + 1 slack.
    """
    N = planned.poses.shape[0] - 1
    trim = planned.trim
    v_bar = trim.velocities()
    d_ref = balancing_drive(trim.vx_bar, params)
    d_ref = float(np.clip(d_ref, params.d_min, params.d_max))
    u_ref = ControlInput(d_ref, trim.delta_bar)

    x_refs = [np.concatenate([planned.poses[k], v_bar]) for k in range(N + 1)]
    Q = np.diag(weights.Q)
    R = np.diag(weights.R)
    P = np.diag(weights.terminal())

    stages = []
    for k in range(N + 1):
        nx, nu = 6, (2 if k < N else 0)
        ref_state = VehicleState.from_array(x_refs[k])
        A = B = c = None
        if k < N:
            lin = linearize_discretize(ref_state, u_ref, params, Td)
            A, B = lin.Ad, lin.Bd
            c = lin.Ad @ x_refs[k] + lin.Bd @ u_ref.as_array() + lin.gd - x_refs[k + 1]
        # soft slab rows in deviation coordinates
        F = corridor_slabs.F[k]
        f = corridor_slabs.f[k] - F @ x_refs[k][:2]
        Cx = np.zeros((2 + (4 if k < N else 0), nx))
        Cx[0, :2] = F[0]
        Cx[1, :2] = F[1]
        Cu = np.zeros((Cx.shape[0], nu))
        e = np.concatenate([f, np.zeros(Cx.shape[0] - 2)])
        soft = np.zeros(Cx.shape[0], dtype=bool)
        soft[:2] = True
        if k < N:
            Cu[2, 0] = 1.0
            Cu[3, 0] = -1.0
            Cu[4, 1] = 1.0
            Cu[5, 1] = -1.0
            e[2] = params.d_max - u_ref.d
            e[3] = u_ref.d - params.d_min
            e[4] = params.delta_max - u_ref.delta
            e[5] = params.delta_max + u_ref.delta
        stages.append(qpmod.QPStage(
            Q=(P if k == N else Q).copy(), R=R.copy() if k < N else np.zeros((0, 0)),
            S=np.zeros((nu, nx)), q=np.zeros(nx), r=np.zeros(nu),
            A=A, B=B, c=c, Cx=Cx, Cu=Cu[:, :nu], e=e, soft=soft))
    x0 = state.as_array() - x_refs[0]
    prob = qpmod.MultistageQP(stages, x0)
    return qpmod.lower_soft_constraints(prob, weights.penalty())


class HrhcController:
    """Stateful stepping wrapper: plan, track, apply; one QP per step."""

    def __init__(self, track: TrackGeometry, library: TrimLibrary,
                 params: ModelParams, config: HrhcConfig | None = None):
        self.track = track
        self.library = library
        self.params = params
        self.config = config or HrhcConfig()
        self.prev_plan: PlannedPath | None = None
        self.prev_input = ControlInput(0.0, 0.0)
        self.fallback_count = 0
        self.last_solution: qpmod.QPSolution | None = None
        self.last_slack = 0.0
        self.last_times: dict = {}

    def predicted_positions(self) -> np.ndarray | None:
        """Horizon positions of the last plan (corridor planner coupling)."""
        if self.prev_plan is None:
            return None
        return self.prev_plan.poses[:, :2].copy()

    def step(self, state: VehicleState, corridor=None,
             delay: float | None = None) -> ControlInput:
        cfg = self.config
        params = self.params
        if delay:
            try:
                state = integrate(state, self.prev_input, delay,
                                  substeps=max(1, int(delay / 1e-3)), params=params)
            except ModelDomainError:
                pass  # rolling to a stop; plan from the measured state
        t0 = time.perf_counter()
        planned = plan(self.track, state, self.library, cfg.sel, corridor,
                       cfg.margin, params)
        if not planned.feasible:
            self.fallback_count += 1
        self.prev_plan = planned
        t1 = time.perf_counter()

        center_fn, width_fn = _corridor_lookup(self.track, corridor, 0.0)
        thetas = np.array([project_pwl(self.track, X, Y)
                           for X, Y, _ in planned.poses])
        slabs = corridor_halfspaces(
            self.track, planned.poses[:, :2],
            widths=np.maximum(width_fn(thetas), 0.02),
            centers=center_fn(thetas))
        t2 = time.perf_counter()
        prob = build_tracking_qp(planned, slabs, cfg.weights, state, params,
                                 cfg.sel.Td)
        t3 = time.perf_counter()
        sol = qpmod.solve(prob)
        self.last_solution = sol
        N = cfg.sel.N
        self.last_times = {"path_plan": t1 - t0, "border_adjust": t2 - t1,
                           "qp_gen": t3 - t2, "qp_solve": sol.solve_time}
        d_ref = float(np.clip(balancing_drive(planned.trim.vx_bar, params),
                              params.d_min, params.d_max))
        if sol.status != "optimal":
            # track the planned trim open loop rather than applying a
            # non-converged correction
            self.last_slack = 0.0
            u = ControlInput(d_ref, planned.trim.delta_bar)
            self.prev_input = u
            return u
        self.last_slack = max(float(sol.us[k][2]) for k in range(N))
        self.last_slack = max(self.last_slack, float(sol.us[N][0]))
        u0 = np.array([d_ref, planned.trim.delta_bar]) + sol.us[0][:2]
        u = ControlInput(float(np.clip(u0[0], params.d_min, params.d_max)),
                         float(np.clip(u0[1], -params.delta_max, params.delta_max)))
        self.prev_input = u
        return u


__all__ = [
    "SelectionParams", "PlannedPath", "HrhcWeights", "HrhcConfig",
    "candidate_set", "rollout", "plan", "fallback", "build_tracking_qp",
    "HrhcController",
]
