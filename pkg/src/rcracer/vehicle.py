"""Nonlinear bicycle model with simplified Pacejka tire forces.

Implements the continuous-time dynamics, fixed-step RK2 integration,
analytic linearization and exact zero-order-hold discretization used by
both controllers and by the simulator plant.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
from scipy.linalg import expm


class ModelDomainError(ValueError):
    """Raised when the model is evaluated outside its domain (e.g. vx <= 0)."""


@dataclass(frozen=True)
class VehicleState:
    """Pose and body-frame velocities of the car."""

    X: float
    Y: float
    phi: float
    vx: float
    vy: float
    omega: float

    def as_array(self) -> np.ndarray:
        return np.array([self.X, self.Y, self.phi, self.vx, self.vy, self.omega])

    @staticmethod
    def from_array(x) -> "VehicleState":
        return VehicleState(*(float(v) for v in x))


@dataclass(frozen=True)
class ControlInput:
    """Drivetrain duty cycle and steering angle."""

    d: float
    delta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.d, self.delta])

    @staticmethod
    def from_array(u) -> "ControlInput":
        return ControlInput(float(u[0]), float(u[1]))


@dataclass(frozen=True)
class ModelParams:
    """Physical parameters and operating bounds of a 1:43 scale car.

    The tire curves are D*sin(C*arctan(B*alpha)) per axle; the drivetrain
    combines a DC motor gain with rolling resistance and aerodynamic drag.
    """

    m: float = 0.041          # mass [kg]
    Iz: float = 27.8e-6       # yaw inertia [kg m^2]
    lf: float = 0.029         # CoG to front axle [m]
    lr: float = 0.033         # CoG to rear axle [m]
    Bf: float = 9.0           # front tire stiffness factor
    Cf: float = 1.6           # front tire shape factor
    Df: float = 0.192         # front tire peak force [N]
    Br: float = 10.0          # rear tire stiffness factor
    Cr_tire: float = 1.7      # rear tire shape factor
    Dr: float = 0.1737        # rear tire peak force [N]
    Cm1: float = 0.287        # motor gain [N]
    Cm2: float = 0.07         # motor back-EMF gain [N s/m]
    Croll: float = 0.0518     # rolling resistance [N]
    Cd: float = 0.00035       # drag coefficient [N s^2/m^2]
    d_min: float = -1.0
    d_max: float = 1.0
    delta_max: float = 0.35   # steering limit [rad]
    vx_min: float = 0.05      # slip-angle evaluation floor [m/s]
    vx_max: float = 4.0
    vy_max: float = 2.0
    omega_max: float = 8.0

    def __post_init__(self):
        if min(self.m, self.Iz, self.lf, self.lr, self.Df, self.Dr) <= 0:
            raise ValueError("m, Iz, lf, lr, Df, Dr must be positive")
        if self.d_min >= self.d_max or self.delta_max <= 0:
            raise ValueError("input bounds must be ordered")

    def alpha_peak_front(self) -> float:
        """Slip angle at which the front tire force peaks."""
        return np.tan(np.pi / (2.0 * self.Cf)) / self.Bf

    def alpha_peak_rear(self) -> float:
        return np.tan(np.pi / (2.0 * self.Cr_tire)) / self.Br


@dataclass(frozen=True)
class LinearizedModel:
    """Exact ZOH discretization x+ = Ad x + Bd u + gd of a frozen linearization."""

    Ad: np.ndarray
    Bd: np.ndarray
    gd: np.ndarray
    Ts: float


def load_params(path) -> ModelParams:
    """Read ModelParams from a flat key/value config file (SI units).

    Lines are `key = value`; blank lines and `#` comments are ignored.
    """
    values = {}
    names = {f.name for f in fields(ModelParams)}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in names:
            raise ValueError(f"unknown model parameter {key!r}")
        values[key] = float(raw)
    return ModelParams(**values)


def save_params(params: ModelParams, path) -> None:
    lines = [f"{f.name} = {getattr(params, f.name)!r}" for f in fields(ModelParams)]
    Path(path).write_text("\n".join(lines) + "\n")


def _check_finite(state: VehicleState, u: ControlInput) -> None:
    if not (np.isfinite(state.as_array()).all() and np.isfinite(u.as_array()).all()):
        raise ModelDomainError("non-finite state or input")


def tire_forces(state: VehicleState, u: ControlInput, params: ModelParams):
    """Front/rear lateral tire forces and rear longitudinal force (N).

    vx is floored at params.vx_min inside the slip-angle evaluation to avoid
    the arctan singularity at standstill.
    """
    _check_finite(state, u)
    if state.vx <= 0:
        raise ModelDomainError(f"vx must be positive, got {state.vx}")
    vx = max(state.vx, params.vx_min)
    alpha_f = -np.arctan((state.omega * params.lf + state.vy) / vx) + u.delta
    alpha_r = np.arctan((state.omega * params.lr - state.vy) / vx)
    Ffy = params.Df * np.sin(params.Cf * np.arctan(params.Bf * alpha_f))
    Fry = params.Dr * np.sin(params.Cr_tire * np.arctan(params.Br * alpha_r))
    Frx = (params.Cm1 - params.Cm2 * state.vx) * u.d - params.Croll - params.Cd * state.vx ** 2
    return Ffy, Fry, Frx


def balancing_drive(vx: float, params: ModelParams) -> float:
    """Duty cycle that makes Frx = Croll + Cd*vx^2 vanish at speed vx."""
    return (params.Croll + params.Cd * vx ** 2) / (params.Cm1 - params.Cm2 * vx)


def dynamics(state: VehicleState, u: ControlInput, params: ModelParams) -> np.ndarray:
    """Time derivative of the six model states."""
    Ffy, Fry, Frx = tire_forces(state, u, params)
    sphi, cphi = np.sin(state.phi), np.cos(state.phi)
    sd, cd = np.sin(u.delta), np.cos(u.delta)
    return np.array([
        state.vx * cphi - state.vy * sphi,
        state.vx * sphi + state.vy * cphi,
        state.omega,
        (Frx - Ffy * sd) / params.m + state.vy * state.omega,
        (Fry + Ffy * cd) / params.m - state.vx * state.omega,
        (Ffy * params.lf * cd - Fry * params.lr) / params.Iz,
    ])


def _rk2_step(f, x: np.ndarray, h: float) -> np.ndarray:
    k1 = f(x)
    return x + h * f(x + 0.5 * h * k1)


def integrate(state: VehicleState, u: ControlInput, dt: float, substeps: int = 4,
              params: ModelParams | None = None) -> VehicleState:
    """RK2 (midpoint) integration with piecewise-constant input.

    A vx excursion below zero during integration raises ModelDomainError so
    callers can flag the step as degenerate.
    """
    if dt <= 0 or substeps < 1:
        raise ValueError("dt must be positive and substeps >= 1")
    p = params if params is not None else ModelParams()

    def f(x):
        return dynamics(VehicleState.from_array(x), u, p)

    x = state.as_array()
    h = dt / substeps
    for _ in range(substeps):
        x = _rk2_step(f, x, h)
        if x[3] <= 0:
            raise ModelDomainError("vx crossed zero during integration")
    return VehicleState.from_array(x)


def kinematics_rhs(pose: np.ndarray, v_const: np.ndarray) -> np.ndarray:
    """Kinematic block d/dt (X, Y, phi) for frozen body velocities (vx, vy, omega)."""
    vx, vy, omega = v_const
    return np.array([
        vx * np.cos(pose[2]) - vy * np.sin(pose[2]),
        vx * np.sin(pose[2]) + vy * np.cos(pose[2]),
        omega,
    ])


def integrate_kinematic(pose: np.ndarray, v_const, dt: float, substeps: int = 1) -> np.ndarray:
    """RK2 integration of the kinematic block under constant body velocities."""
    v = np.asarray(v_const, dtype=float)
    x = np.asarray(pose, dtype=float)
    h = dt / substeps
    for _ in range(substeps):
        x = _rk2_step(lambda p: kinematics_rhs(p, v), x, h)
    return x


def linearize(state: VehicleState, u: ControlInput, params: ModelParams):
    """Analytic Jacobians (Ac, Bc) and affine residual gc at (state, u).

    gc is defined so that f(x, u) = Ac x + Bc u + gc holds exactly at the
    linearization point.
    """
    Ffy, Fry, _ = tire_forces(state, u, params)
    p = params
    vxs = max(state.vx, p.vx_min)       # slip-angle evaluation speed
    clamped = state.vx < p.vx_min
    qf = state.omega * p.lf + state.vy  # front slip numerator
    qr = state.omega * p.lr - state.vy  # rear slip numerator
    df2 = vxs ** 2 + qf ** 2
    dr2 = vxs ** 2 + qr ** 2

    alpha_f = -np.arctan(qf / vxs) + u.delta
    alpha_r = np.arctan(qr / vxs)
    # slope of the tire curve w.r.t. slip angle
    Gf = p.Df * p.Cf * np.cos(p.Cf * np.arctan(p.Bf * alpha_f)) * p.Bf / (1.0 + (p.Bf * alpha_f) ** 2)
    Gr = p.Dr * p.Cr_tire * np.cos(p.Cr_tire * np.arctan(p.Br * alpha_r)) * p.Br / (1.0 + (p.Br * alpha_r) ** 2)

    daf_dvx = 0.0 if clamped else qf / df2
    daf_dvy = -vxs / df2
    daf_dom = -p.lf * vxs / df2
    dar_dvx = 0.0 if clamped else -qr / dr2
    dar_dvy = -vxs / dr2
    dar_dom = p.lr * vxs / dr2

    dFrx_dvx = -p.Cm2 * u.d - 2.0 * p.Cd * state.vx
    dFrx_dd = p.Cm1 - p.Cm2 * state.vx

    sphi, cphi = np.sin(state.phi), np.cos(state.phi)
    sd, cd = np.sin(u.delta), np.cos(u.delta)

    Ac = np.zeros((6, 6))
    Bc = np.zeros((6, 2))
    Ac[0, 2] = -state.vx * sphi - state.vy * cphi
    Ac[0, 3] = cphi
    Ac[0, 4] = -sphi
    Ac[1, 2] = state.vx * cphi - state.vy * sphi
    Ac[1, 3] = sphi
    Ac[1, 4] = cphi
    Ac[2, 5] = 1.0

    Ac[3, 3] = (dFrx_dvx - sd * Gf * daf_dvx) / p.m
    Ac[3, 4] = -sd * Gf * daf_dvy / p.m + state.omega
    Ac[3, 5] = -sd * Gf * daf_dom / p.m + state.vy
    Bc[3, 0] = dFrx_dd / p.m
    Bc[3, 1] = (-Ffy * cd - sd * Gf) / p.m

    Ac[4, 3] = (Gr * dar_dvx + cd * Gf * daf_dvx) / p.m - state.omega
    Ac[4, 4] = (Gr * dar_dvy + cd * Gf * daf_dvy) / p.m
    Ac[4, 5] = (Gr * dar_dom + cd * Gf * daf_dom) / p.m - state.vx
    Bc[4, 1] = (-Ffy * sd + cd * Gf) / p.m

    Ac[5, 3] = (p.lf * cd * Gf * daf_dvx - p.lr * Gr * dar_dvx) / p.Iz
    Ac[5, 4] = (p.lf * cd * Gf * daf_dvy - p.lr * Gr * dar_dvy) / p.Iz
    Ac[5, 5] = (p.lf * cd * Gf * daf_dom - p.lr * Gr * dar_dom) / p.Iz
    Bc[5, 1] = p.lf * (-Ffy * sd + cd * Gf) / p.Iz

    gc = dynamics(state, u, params) - Ac @ state.as_array() - Bc @ u.as_array()
    return Ac, Bc, gc


def discretize(Ac: np.ndarray, Bc: np.ndarray, gc: np.ndarray, Ts: float) -> LinearizedModel:
    """Exact ZOH discretization via the exponential of the augmented matrix.

    exp([[Ac, Bc, gc], [0, 0, 0]] * Ts) carries (Ad, Bd, gd) in its top rows.
    """
    if Ts <= 0:
        raise ValueError("Ts must be positive")
    n, m = Ac.shape[0], Bc.shape[1]
    M = np.zeros((n + m + 1, n + m + 1))
    M[:n, :n] = Ac
    M[:n, n:n + m] = Bc
    M[:n, n + m] = gc
    E = expm(M * Ts)
    return LinearizedModel(Ad=E[:n, :n], Bd=E[:n, n:n + m], gd=E[:n, n + m], Ts=Ts)


def linearize_discretize(state: VehicleState, u: ControlInput, params: ModelParams,
                         Ts: float) -> LinearizedModel:
    Ac, Bc, gc = linearize(state, u, params)
    return discretize(Ac, Bc, gc, Ts)


__all__ = [
    "VehicleState", "ControlInput", "ModelParams", "LinearizedModel",
    "ModelDomainError", "load_params", "save_params", "tire_forces",
    "balancing_drive", "dynamics", "integrate", "integrate_kinematic",
    "kinematics_rhs", "linearize", "discretize", "linearize_discretize",
]
