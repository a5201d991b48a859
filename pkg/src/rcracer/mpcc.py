"""Model predictive contouring controller.

Single-level racing controller: the progress along the track is an extra
integrator state theta_A, the cost trades approximate contouring error
against rewarded progress, and input rates are penalized through lifted
copies of the previous inputs. Each control step performs exactly one QP
solve, linearized around the previous solution shifted by one stage.

Stage variables: 6 vehicle states, theta_A, 3 lifted previous inputs
(state part, 10) and inputs d, delta, v plus the soft-constraint slack
(input part, 4) — 14 per stage.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import qp as qpmod
from .track import (ArcSpline, TrackGeometry, corridor_bounds,
                    corridor_halfspaces, project_pwl, project_spline,
                    signed_lateral_offset)
from .vehicle import (ControlInput, ModelDomainError, ModelParams,
                      VehicleState, integrate, linearize_discretize)

NX = 10   # X, Y, phi, vx, vy, omega, theta, prev_d, prev_delta, prev_v
NU = 3    # d, delta, v


@dataclass(frozen=True)
class MpccWeights:
    qc: float = 0.1          # contouring error weight
    ql: float = 400.0        # lag error weight (kept high)
    gamma: float = 1.75      # progress reward per meter
    Ru: np.ndarray = field(default_factory=lambda: np.array([0.3, 4.0]))
    Rv: float = 0.02         # progress-rate rate weight
    q: float = 400.0         # soft slab penalty
    # damping toward the linearization trajectory on (vx, vy, omega);
    # keeps successive iterates close enough for the model to stay valid
    Rx: np.ndarray = field(default_factory=lambda: np.array([0.02, 0.5, 0.05]))

    def __post_init__(self):
        if min(self.qc, self.ql, self.gamma, self.Rv, self.q) <= 0 \
                or np.any(np.asarray(self.Ru) <= 0) \
                or np.any(np.asarray(self.Rx) < 0):
            raise ValueError("all weights must be positive")
        if self.ql <= self.qc:
            raise ValueError("lag weight must dominate contouring weight")


@dataclass(frozen=True)
class MpccConfig:
    N: int = 40
    Ts: float = 0.02
    weights: MpccWeights = field(default_factory=MpccWeights)
    v_max: float | None = None     # progress rate bound, 1.5x top speed default
    margin: float = 0.03           # lateral clearance from borders
    max_failures: int = 5

    def progress_bound(self, params: ModelParams) -> float:
        return 1.5 * params.vx_max if self.v_max is None else self.v_max


@dataclass
class SolutionTrajectory:
    """Previous QP output: linearization points for the next step."""

    xs: np.ndarray   # (N+1, 10)
    us: np.ndarray   # (N, 3)


def approx_errors(spline: ArcSpline, X: float, Y: float, theta_A: float):
    """Approximate contouring and lag errors at progress theta_A."""
    ref = spline.position(theta_A)
    phi = spline.tangent_angle(theta_A)
    dx, dy = X - ref[..., 0], Y - ref[..., 1]
    e_c = np.sin(phi) * dx - np.cos(phi) * dy
    e_l = -np.cos(phi) * dx - np.sin(phi) * dy
    return e_c, e_l


def linearize_errors(spline: ArcSpline, lin_point):
    """First-order model of (e_c, e_l) in (X, Y, theta_A).

    Returns (e0, J) with e0 the 2-vector of errors at the point and J the
    2x3 Jacobian, so e(z) ~ e0 + J (z - z_lin).
    """
    X, Y, th = lin_point
    ref = spline.position(th)
    d = spline.derivative(th)
    phi = float(spline.tangent_angle(th))
    dphi = float(spline.tangent_angle_rate(th))
    s, c = np.sin(phi), np.cos(phi)
    dx, dy = X - ref[0], Y - ref[1]
    e0 = np.array([s * dx - c * dy, -c * dx - s * dy])
    J = np.array([
        [s, -c, c * dphi * dx + s * dphi * dy - s * d[0] + c * d[1]],
        [-c, -s, s * dphi * dx - c * dphi * dy + c * d[0] + s * d[1]],
    ])
    return e0, J


def _augment(state: VehicleState, theta: float, prev_u: np.ndarray) -> np.ndarray:
    return np.concatenate([state.as_array(), [theta], prev_u])


def initialize_trajectory(state: VehicleState, theta0: float, prev_u,
                          params: ModelParams, config: MpccConfig) -> SolutionTrajectory:
    """Recovery initialization: hold the current input, roll the model out."""
    prev_u = np.asarray(prev_u, dtype=float)
    N, Ts = config.N, config.Ts
    xs = np.zeros((N + 1, NX))
    us = np.zeros((N, NU))
    s = state
    th = theta0
    xs[0] = _augment(s, th, prev_u)
    u = ControlInput(float(prev_u[0]), float(prev_u[1]))
    for k in range(N):
        v = max(s.vx, 0.3)
        us[k] = (u.d, u.delta, v)
        try:
            s = integrate(s, u, Ts, substeps=4, params=params)
        except ModelDomainError:
            s = VehicleState(s.X, s.Y, s.phi, params.vx_min, 0.0, 0.0)
        th = th + v * Ts
        xs[k + 1] = _augment(s, th, us[k])
    return SolutionTrajectory(xs=xs, us=us)


def shift_trajectory(prev: SolutionTrajectory, params: ModelParams,
                     config: MpccConfig) -> SolutionTrajectory:
    """Shift by one stage; the new terminal point is one nonlinear step."""
    N, Ts = config.N, config.Ts
    xs = np.zeros_like(prev.xs)
    us = np.zeros_like(prev.us)
    xs[:N] = prev.xs[1:]
    us[:N - 1] = prev.us[1:]
    us[N - 1] = prev.us[-1]
    last = xs[N - 1]
    u_last = ControlInput(float(us[N - 1][0]), float(us[N - 1][1]))
    try:
        s = integrate(VehicleState.from_array(last[:6]), u_last, Ts,
                      substeps=4, params=params)
        veh = s.as_array()
    except ModelDomainError:
        veh = last[:6]
    theta = last[6] + us[N - 1][2] * Ts
    xs[N] = np.concatenate([veh, [theta], us[N - 1]])
    return SolutionTrajectory(xs=xs, us=us)


def build_mpcc_qp(prev: SolutionTrajectory, state: VehicleState, theta0: float,
                  corridor_slabs, weights: MpccWeights, config: MpccConfig,
                  params: ModelParams, spline: ArcSpline) -> qpmod.MultistageQP:
    """One real-time-iteration QP around the shifted previous solution.

    `corridor_slabs` is a track.Corridor with N+1 slabs anchored at the
    linearization positions. The returned problem still carries soft rows;
    lower and scale before solving.
    """
    N, Ts = config.N, config.Ts
    W = np.diag([weights.qc, weights.ql])
    Wr = np.diag([weights.Ru[0], weights.Ru[1], weights.Rv])
    v_bar = config.progress_bound(params)

    x_meas = _augment(state, theta0, prev.xs[0, 7:10])
    lin_xs = prev.xs.copy()
    lin_xs[0] = x_meas

    stages = []
    for k in range(N + 1):
        z = lin_xs[k]
        nu = NU if k < N else 0
        Q = np.zeros((NX, NX))
        q = np.zeros(NX)
        # contouring / lag cost on (X, Y, theta)
        e0, J = linearize_errors(spline, (z[0], z[1], z[6]))
        idx = [0, 1, 6]
        b = e0 - J @ z[idx]
        Q[np.ix_(idx, idx)] += 2.0 * J.T @ W @ J
        q[idx] += 2.0 * J.T @ W @ b
        # damp velocity states toward the linearization point
        vel = [3, 4, 5]
        Q[vel, vel] += 2.0 * np.asarray(weights.Rx)
        q[vel] += -2.0 * np.asarray(weights.Rx) * z[vel]
        R = np.zeros((nu, nu))
        S = np.zeros((nu, NX))
        r = np.zeros(nu)
        if k < N:
            # rate cost (u - lifted copy)' Wr (u - lifted copy)
            R += 2.0 * Wr
            Q[7:10, 7:10] += 2.0 * Wr
            S[:, 7:10] += -2.0 * Wr
            # progress reward
            r[2] += -weights.gamma * Ts
        A = B = c = None
        if k < N:
            # clamp the linearization point back into the model's domain
            veh_arr = z[:6].copy()
            veh_arr[3] = max(veh_arr[3], params.vx_min)
            veh = VehicleState.from_array(veh_arr)
            u_lin = ControlInput(
                float(np.clip(prev.us[k][0], params.d_min, params.d_max)),
                float(np.clip(prev.us[k][1], -params.delta_max, params.delta_max)))
            lin = linearize_discretize(veh, u_lin, params, Ts)
            A = np.zeros((NX, NX))
            B = np.zeros((NX, NU))
            A[:6, :6] = lin.Ad
            B[:6, :2] = lin.Bd
            A[6, 6] = 1.0
            B[6, 2] = Ts
            B[7:10, :] = np.eye(3)
            c = np.zeros(NX)
            c[:6] = lin.gd
        # inequalities: soft slab + velocity envelope (skip the fixed first
        # stage), hard input boxes
        n_soft = 0 if k == 0 else 8
        ni = n_soft + (2 * NU if k < N else 0)
        Cx = np.zeros((ni, NX))
        Cu = np.zeros((ni, nu))
        e = np.zeros(ni)
        soft = np.zeros(ni, dtype=bool)
        if n_soft:
            F = corridor_slabs.F[k]
            Cx[0, :2] = F[0]
            Cx[1, :2] = F[1]
            e[0] = corridor_slabs.f[k][0]
            e[1] = corridor_slabs.f[k][1]
            Cx[2, 3], e[2] = 1.0, params.vx_max
            Cx[3, 3], e[3] = -1.0, -params.vx_min
            Cx[4, 4], e[4] = 1.0, params.vy_max
            Cx[5, 4], e[5] = -1.0, params.vy_max
            Cx[6, 5], e[6] = 1.0, params.omega_max
            Cx[7, 5], e[7] = -1.0, params.omega_max
            soft[:n_soft] = True
        if k < N:
            o = n_soft
            lo = np.array([params.d_min, -params.delta_max, 0.0])
            hi = np.array([params.d_max, params.delta_max, v_bar])
            Cu[o:o + 3, :] = np.eye(3)
            Cu[o + 3:o + 6, :] = -np.eye(3)
            e[o:o + 3] = hi
            e[o + 3:o + 6] = -lo
        stages.append(qpmod.QPStage(Q=Q, R=R, S=S, q=q, r=r, A=A, B=B, c=c,
                                    Cx=Cx, Cu=Cu, e=e, soft=soft))
    return qpmod.MultistageQP(stages, x_meas)


def scale_problem(qp_in: qpmod.MultistageQP, bounds, obj_factor: float = 0.1):
    """Affine variable scaling to [-1, 1] plus objective scaling.

    `bounds` is a per-stage list of (x_lo, x_hi, u_lo, u_hi); variables
    with a nonpositive range are left unscaled. Returns the scaled problem
    and an unscale(xs, us) map back to original coordinates.
    """
    halves_x, centers_x, halves_u, centers_u = [], [], [], []
    for st, (xl, xh, ul, uh) in zip(qp_in.stages, bounds):
        xl, xh = np.asarray(xl, float), np.asarray(xh, float)
        ul, uh = np.asarray(ul, float), np.asarray(uh, float)
        hx = 0.5 * (xh - xl)
        cx = 0.5 * (xh + xl)
        bad = ~(hx > 0) | ~np.isfinite(hx)
        hx[bad], cx[bad] = 1.0, 0.0
        hu = 0.5 * (uh - ul)[:st.nu]
        cu = 0.5 * (uh + ul)[:st.nu]
        bad = ~(hu > 0) | ~np.isfinite(hu)
        hu[bad], cu[bad] = 1.0, 0.0
        halves_x.append(hx)
        centers_x.append(cx)
        halves_u.append(hu)
        centers_u.append(cu)

    stages = []
    for k, st in enumerate(qp_in.stages):
        hx, cx = halves_x[k], centers_x[k]
        hu, cu = halves_u[k], centers_u[k]
        Q = obj_factor * (hx[:, None] * st.Q * hx[None, :])
        R = obj_factor * (hu[:, None] * st.R * hu[None, :])
        S = obj_factor * (hu[:, None] * st.S * hx[None, :])
        q = obj_factor * hx * (st.q + st.Q @ cx + st.S.T @ cu)
        r = obj_factor * hu * (st.r + st.R @ cu + st.S @ cx)
        A = B = c = None
        if st.A is not None:
            hxn, cxn = halves_x[k + 1], centers_x[k + 1]
            A = (st.A * hx[None, :]) / hxn[:, None]
            B = (st.B * hu[None, :]) / hxn[:, None]
            c = (st.A @ cx + st.B @ cu + st.c - cxn) / hxn
        if st.ni:
            Cx = st.Cx * hx[None, :]
            Cu = st.Cu * hu[None, :]
            e = st.e - st.Cx @ cx - st.Cu @ cu
        else:
            Cx, Cu, e = st.Cx, st.Cu, st.e
        stages.append(qpmod.QPStage(Q=Q, R=R, S=S, q=q, r=r, A=A, B=B, c=c,
                                    Cx=Cx, Cu=Cu, e=e, soft=st.soft.copy()))
    x0 = (qp_in.x0 - centers_x[0]) / halves_x[0]

    def unscale(xs, us):
        xs_o = [centers_x[k] + halves_x[k] * xs[k] for k in range(len(xs))]
        us_o = [centers_u[k] + halves_u[k] * us[k][:len(halves_u[k])]
                for k in range(len(us))]
        return xs_o, us_o

    return qpmod.MultistageQP(stages, x0), unscale


def _stage_bounds(lin_xs, lin_us, params: ModelParams, config: MpccConfig,
                  track_len: float):
    """Scaling envelopes centered on the linearization trajectory."""
    v_bar = config.progress_bound(params)
    dev = np.array([0.5, 0.5, 1.0, 1.5, 1.0, 6.0, 1.0,
                    params.d_max - params.d_min, 2 * params.delta_max, v_bar])
    bounds = []
    for k in range(lin_xs.shape[0]):
        xl = lin_xs[k] - dev
        xh = lin_xs[k] + dev
        if k < lin_us.shape[0]:
            ul = np.array([params.d_min, -params.delta_max, 0.0, 0.0])
            uh = np.array([params.d_max, params.delta_max, v_bar, 1.0])
        else:
            ul = np.zeros(1)
            uh = np.ones(1)
        bounds.append((xl, xh, ul, uh))
    return bounds


class MpccController:
    """Stateful real-time iteration stepping; one QP per control period."""

    def __init__(self, track: TrackGeometry, params: ModelParams,
                 config: MpccConfig | None = None):
        self.track = track
        self.params = params
        self.config = config or MpccConfig()
        self.spline = track.spline
        self.prev: SolutionTrajectory | None = None
        self.prev_theta: float | None = None
        self.prev_input = ControlInput(0.0, 0.0)
        self.prev_v = 0.0
        self.failures = 0
        self.recoveries = 0
        self.last_solution: qpmod.QPSolution | None = None
        self.last_slack = 0.0
        self.last_times: dict = {}

    def predicted_positions(self) -> np.ndarray | None:
        if self.prev is None:
            return None
        return self.prev.xs[:, :2].copy()

    def predicted_progress(self) -> np.ndarray | None:
        """Per-stage progress estimates of the last solution, lap-local."""
        if self.prev is None:
            return None
        return np.mod(self.prev.xs[:, 6], self.track.length)

    def _measure_theta(self, state: VehicleState) -> float:
        L = self.track.length
        if self.prev_theta is None:
            return project_pwl(self.track, state.X, state.Y)
        th = project_spline(self.spline, state.X, state.Y, self.prev_theta)
        return th

    def step(self, state: VehicleState, corridor=None,
             delay: float | None = None) -> ControlInput:
        cfg, params = self.config, self.params
        if delay:
            try:
                state = integrate(state, self.prev_input, delay,
                                  substeps=max(1, int(delay / 1e-3)), params=params)
            except ModelDomainError:
                pass
        t0 = time.perf_counter()
        theta0 = self._measure_theta(state)
        L = self.track.length
        prev_u = np.array([self.prev_input.d, self.prev_input.delta, self.prev_v])
        if self.prev is None:
            self.prev = initialize_trajectory(state, theta0, prev_u, params, cfg)
            self.recoveries += 1
        else:
            self.prev = shift_trajectory(self.prev, params, cfg)
            # lap wrap: keep theta lap-local across the whole horizon
            if theta0 >= L:
                theta0 -= L
                self.prev.xs[:, 6] -= L
            drift = np.hypot(state.X - self.prev.xs[0, 0],
                             state.Y - self.prev.xs[0, 1])
            off = np.array([np.abs(signed_lateral_offset(self.track, x, y))
                            for x, y in self.prev.xs[:, :2]])
            if drift > 0.3 or abs(theta0 - self.prev.xs[0, 6]) > 1.0 \
                    or np.max(off) > 3.0 * np.max(self.track.half_width):
                self.prev = initialize_trajectory(state, theta0, prev_u, params, cfg)
                self.recoveries += 1
        self.prev.xs[0] = _augment(state, theta0, prev_u)
        self.prev_theta = theta0
        t1 = time.perf_counter()

        center_fn, width_fn = corridor_bounds(self.track, corridor, cfg.margin)
        thetas = np.mod(self.prev.xs[:, 6], L)
        anchors = self.prev.xs[:, :2].copy()
        for i, (x, y) in enumerate(anchors):
            th = project_pwl(self.track, x, y)
            off = signed_lateral_offset(self.track, x, y, th)
            hw = float(self.track.half_width_at(th))
            if abs(off) > hw:
                # pull wild linearization points back onto the track
                c = self.spline.position(th)
                d = self.spline.derivative(th)
                t = d / np.linalg.norm(d)
                n = np.array([-t[1], t[0]])
                anchors[i] = c + np.clip(off, -hw, hw) * n
        slabs = corridor_halfspaces(
            self.track, anchors,
            widths=np.maximum(width_fn(thetas), 0.02),
            centers=center_fn(thetas))
        t2 = time.perf_counter()
        prob = build_mpcc_qp(self.prev, state, theta0, slabs, cfg.weights, cfg,
                             params, self.spline)
        lowered = qpmod.lower_soft_constraints(prob, cfg.weights.q)
        bounds = _stage_bounds(self.prev.xs, self.prev.us, params, cfg, L)
        scaled, unscale = scale_problem(lowered, bounds)
        t3 = time.perf_counter()
        try:
            sol = qpmod.solve(scaled)
            self.last_times = {"path_plan": t1 - t0, "border_adjust": t2 - t1,
                               "qp_gen": t3 - t2, "qp_solve": sol.solve_time}
            self.last_solution = sol
            if sol.status != "optimal":
                # keep the shifted previous plan instead of applying a
                # non-converged iterate
                self.failures += 1
                if self.failures > cfg.max_failures:
                    # the linearization trajectory has gone stale; restart
                    # it from the measured state before the next period
                    self.prev = initialize_trajectory(state, theta0, prev_u,
                                                      params, cfg)
                    self.recoveries += 1
                    self.failures = 0
                self.last_slack = 0.0
                u = ControlInput(float(self.prev.us[0][0]),
                                 float(self.prev.us[0][1]))
                self.prev_input = u
                return u
            xs, us = unscale(sol.xs, sol.us)
            self.last_slack = max(float(u[3]) if len(u) > 3 else 0.0 for u in us)
            self.prev = SolutionTrajectory(
                xs=np.array(xs), us=np.array([u[:3] for u in us[:-1]]))
            u0 = us[0]
            self.failures = 0
        except qpmod.QPError:
            self.failures += 1
            if self.failures > cfg.max_failures:
                u = ControlInput(0.0, 0.0)
            else:
                u = ControlInput(float(self.prev.us[0][0]), float(self.prev.us[0][1]))
            self.prev_input = u
            return u
        u = ControlInput(float(np.clip(u0[0], params.d_min, params.d_max)),
                         float(np.clip(u0[1], -params.delta_max, params.delta_max)))
        self.prev_input = u
        self.prev_v = float(np.clip(u0[2], 0.0, cfg.progress_bound(params)))
        return u


__all__ = [
    "MpccWeights", "MpccConfig", "SolutionTrajectory", "approx_errors",
    "linearize_errors", "initialize_trajectory", "shift_trajectory",
    "build_mpcc_qp", "scale_problem", "MpccController", "NX", "NU",
]
