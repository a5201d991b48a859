"""Stationary velocity analysis and the offline trim library.

A trim is a (vx, vy, omega, delta) tuple at which the lateral-velocity and
yaw-rate accelerations vanish under the speed-balancing drive input. Trims
correspond to uniform circular motion and are gridded offline into a library
used by the trajectory enumeration planner.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from enum import Enum
from pathlib import Path

import numpy as np

from .vehicle import (ControlInput, ModelParams, VehicleState,
                      balancing_drive, dynamics, linearize)

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50


class Region(Enum):
    NORMAL = "normal"
    UNDERSTEER = "understeer"
    OVERSTEER = "oversteer"


@dataclass(frozen=True)
class Trim:
    """A stationary velocity point of the lateral dynamics."""

    vx_bar: float
    vy_bar: float
    omega_bar: float
    delta_bar: float
    region: Region

    @property
    def speed(self) -> float:
        return float(np.hypot(self.vx_bar, self.vy_bar))

    @property
    def radius(self) -> float:
        """Radius of the associated circular motion (inf for straight trims)."""
        if self.omega_bar == 0.0:
            return float("inf")
        return self.speed / abs(self.omega_bar)

    def velocities(self) -> np.ndarray:
        return np.array([self.vx_bar, self.vy_bar, self.omega_bar])

    def mirrored(self) -> "Trim":
        return Trim(self.vx_bar, -self.vy_bar, -self.omega_bar, -self.delta_bar, self.region)


def _lateral_residual(params: ModelParams, vx: float, delta: float, vy: float, omega: float):
    """Residual (vy_dot, omega_dot) and its 2x2 Jacobian in (vy, omega)."""
    state = VehicleState(0.0, 0.0, 0.0, vx, vy, omega)
    u = ControlInput(balancing_drive(vx, params), delta)
    f = dynamics(state, u, params)
    Ac, _, _ = linearize(state, u, params)
    return np.array([f[4], f[5]]), Ac[np.ix_([4, 5], [4, 5])]


def stationary_residual(params: ModelParams, trim: Trim) -> float:
    """Max-norm of (vy_dot, omega_dot) at the trim with the balancing drive."""
    r, _ = _lateral_residual(params, trim.vx_bar, trim.delta_bar, trim.vy_bar, trim.omega_bar)
    return float(np.max(np.abs(r)))


def solve_stationary(params: ModelParams, vx_bar: float, delta_bar: float,
                     guess=(0.0, 0.0)):
    """Newton solve of the 2x2 stationary system; None if not converged.

    Damped steps keep the iteration inside a sane envelope; a singular
    Jacobian is reported as non-convergence rather than raised.
    """
    if vx_bar <= 0:
        raise ValueError("vx_bar must be positive")
    vy, omega = float(guess[0]), float(guess[1])
    for _ in range(NEWTON_MAX_ITER):
        r, J = _lateral_residual(params, vx_bar, delta_bar, vy, omega)
        if np.max(np.abs(r)) < NEWTON_TOL:
            return vy, omega
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            return None
        scale = min(1.0, 1.0 / np.max(np.abs(step)))
        vy += scale * step[0]
        omega += scale * step[1]
        if abs(vy) > 6.0 or abs(omega) > 60.0:
            return None
    return None


def classify(params: ModelParams, vx_bar: float, vy_bar: float, omega_bar: float,
             delta_bar: float) -> Region:
    """Region of a stationary point, from front/rear tire saturation."""
    vx = max(vx_bar, params.vx_min)
    alpha_f = -np.arctan((omega_bar * params.lf + vy_bar) / vx) + delta_bar
    alpha_r = np.arctan((omega_bar * params.lr - vy_bar) / vx)
    if abs(alpha_r) > params.alpha_peak_rear():
        return Region.OVERSTEER
    if abs(alpha_f) > params.alpha_peak_front():
        return Region.UNDERSTEER
    return Region.NORMAL


def stability(params: ModelParams, trim: Trim) -> bool:
    """True if the (vy, omega) subsystem is locally asymptotically stable."""
    _, J = _lateral_residual(params, trim.vx_bar, trim.delta_bar,
                             trim.vy_bar, trim.omega_bar)
    return bool(np.max(np.real(np.linalg.eigvals(J))) < 0.0)


def _make_trim(params: ModelParams, vx: float, delta: float, vy: float, omega: float) -> Trim:
    return Trim(vx, vy, omega, delta, classify(params, vx, vy, omega, delta))


# Default library layout: 13 speed levels (0.5 .. 3.5 m/s in 0.25 steps).
# Normal-region trims per level (odd counts so the straight trim is always
# present); drifting trims per side for the four mid-speed levels.
DEFAULT_VX_GRID = tuple(np.round(np.arange(0.5, 3.51, 0.25), 3))
DEFAULT_NORMAL_COUNTS = (7, 7, 5, 5, 5, 5, 5, 5, 5, 5, 5, 5, 5)
DEFAULT_DRIFT_COUNTS = {1.5: 3, 1.75: 4, 2.0: 3, 2.25: 3}
_DRIFT_DELTA_RANGE = (0.15, 0.35)
_DRIFT_GUESSES = ((0.5, -5.0), (0.8, -4.5), (1.2, -4.0), (1.6, -3.5))


@dataclass(frozen=True)
class TrimLibrary:
    """Immutable, ordered collection of trims grouped by forward speed."""

    trims: tuple
    params_hash: str

    def __len__(self) -> int:
        return len(self.trims)

    def __iter__(self):
        return iter(self.trims)

    @property
    def n_drift(self) -> int:
        return sum(1 for t in self.trims if t.region is Region.OVERSTEER)

    def vx_levels(self):
        return sorted({t.vx_bar for t in self.trims})

    def at_vx(self, vx: float):
        return [t for t in self.trims if abs(t.vx_bar - vx) < 1e-9]

    def save(self, path) -> None:
        lines = ["# rcracer trim library v1", f"# params_hash = {self.params_hash}",
                 "# vx vy omega delta region"]
        for t in self.trims:
            lines.append(f"{t.vx_bar:.6f} {t.vy_bar:.12e} {t.omega_bar:.12e} "
                         f"{t.delta_bar:.6f} {t.region.value}")
        Path(path).write_text("\n".join(lines) + "\n")

    @staticmethod
    def load(path) -> "TrimLibrary":
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith("# rcracer trim library v1"):
            raise ValueError("not a trim library file")
        params_hash = lines[1].split("=", 1)[1].strip()
        trims = []
        for line in lines[2:]:
            if not line or line.startswith("#"):
                continue
            vx, vy, om, de, region = line.split()
            trims.append(Trim(float(vx), float(vy), float(om), float(de), Region(region)))
        return TrimLibrary(tuple(trims), params_hash)


def params_hash(params: ModelParams) -> str:
    blob = ",".join(f"{f.name}={getattr(params, f.name)!r}" for f in fields(params))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def normal_delta_limit(params: ModelParams, vx: float, step: float = 0.005) -> float:
    """Largest steering angle (by continuation from 0) still in the normal region."""
    guess = (0.0, 0.0)
    limit = 0.0
    for delta in np.arange(0.0, params.delta_max + 1e-12, step):
        root = solve_stationary(params, vx, delta, guess)
        if root is None:
            break
        if classify(params, vx, root[0], root[1], delta) is not Region.NORMAL:
            break
        limit = delta
        guess = root
    return float(limit)


def _solve_drift(params: ModelParams, vx: float, delta: float):
    """Left-drift root (vy > 0, omega < 0) at counter-steering delta, or None."""
    for guess in _DRIFT_GUESSES:
        root = solve_stationary(params, vx, delta, guess)
        if root is None:
            continue
        vy, omega = root
        if vy > 0.2 and omega < 0 and \
                classify(params, vx, vy, omega, delta) is Region.OVERSTEER:
            return root
    return None


def build_trim_library(params: ModelParams, vx_grid=None, normal_counts=None,
                       drift_counts=None, warn=None) -> TrimLibrary:
    """Grid the stationary velocities into a planning library.

    Normal-region trims are spread uniformly over 90% of each level's
    feasible steering range (continuation from the origin); drifting trims
    are taken on the counter-steering branch and mirrored left/right.
    Non-converged grid points are skipped with a warning.
    """
    vx_grid = DEFAULT_VX_GRID if vx_grid is None else vx_grid
    normal_counts = DEFAULT_NORMAL_COUNTS if normal_counts is None else normal_counts
    drift_counts = DEFAULT_DRIFT_COUNTS if drift_counts is None else drift_counts
    if len(vx_grid) == 0:
        raise ValueError("vx grid must be nonempty")

    def _warn(msg):
        if warn is not None:
            warn(msg)

    trims = []
    for vx, count in zip(vx_grid, normal_counts):
        dlim = 0.9 * normal_delta_limit(params, vx)
        deltas = np.linspace(-dlim, dlim, count)
        # continuation outward from delta = 0 on each side
        for side in (deltas[deltas >= 0], deltas[deltas < 0][::-1]):
            guess = (0.0, 0.0)
            for delta in side:
                root = solve_stationary(params, vx, float(delta), guess)
                if root is None:
                    _warn(f"normal trim at vx={vx}, delta={delta:.3f} did not converge")
                    continue
                trims.append(_make_trim(params, float(vx), float(delta), *root))
                guess = root

    for vx, count in sorted(drift_counts.items()):
        deltas = np.linspace(_DRIFT_DELTA_RANGE[0], _DRIFT_DELTA_RANGE[1], count)
        for delta in deltas:
            root = _solve_drift(params, float(vx), float(delta))
            if root is None:
                _warn(f"drift trim at vx={vx}, delta={delta:.3f} did not converge")
                continue
            left = _make_trim(params, float(vx), float(delta), *root)
            trims.append(left)
            trims.append(left.mirrored())

    seen = set()
    unique = []
    for t in trims:
        key = (t.vx_bar, round(t.delta_bar, 9), t.region)
        if key not in seen:
            seen.add(key)
            unique.append(t)
    return TrimLibrary(tuple(unique), params_hash(params))


__all__ = [
    "Region", "Trim", "TrimLibrary", "solve_stationary", "classify",
    "stability", "stationary_residual", "build_trim_library",
    "normal_delta_limit", "params_hash", "DEFAULT_VX_GRID",
    "DEFAULT_NORMAL_COUNTS", "DEFAULT_DRIFT_COUNTS",
]
