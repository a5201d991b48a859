"""Track geometry: center line, arc-length spline, projections, corridors.

The center line is stored as an ordered point list with per-point lateral
half width. Two parameterizations coexist and share knot positions: a
piecewise linear one (cheap scalar projection, used by the planner) and an
arc-length cubic spline (smooth reference for the contouring controller).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline


class TrackError(ValueError):
    pass


@dataclass(frozen=True)
class Corridor:
    """Per-stage pair of parallel halfspaces F p <= f bounding the position."""

    F: np.ndarray        # (N, 2, 2) row normals, rows antiparallel
    f: np.ndarray        # (N, 2) offsets
    theta: np.ndarray    # (N,) station arc length of each anchor
    center: np.ndarray   # (N, 2) slab center points
    normal: np.ndarray   # (N, 2) unit lateral normals
    width: np.ndarray    # (N,) slab half widths

    def __len__(self) -> int:
        return self.F.shape[0]

    def contains(self, k: int, p, margin: float = 0.0) -> bool:
        return bool(np.all(self.F[k] @ np.asarray(p) <= self.f[k] + margin))

    def violation(self, k: int, p) -> float:
        return float(np.max(self.F[k] @ np.asarray(p) - self.f[k]))


class ArcSpline:
    """Cubic spline (X(theta), Y(theta)) parameterized by arc length."""

    def __init__(self, knots: np.ndarray, sx: CubicSpline, sy: CubicSpline, closed: bool):
        self.knots = knots
        self._sx = sx
        self._sy = sy
        self.closed = closed
        self.L = float(knots[-1])
        self._dsx = sx.derivative()
        self._dsy = sy.derivative()
        self._ddsx = sx.derivative(2)
        self._ddsy = sy.derivative(2)

    def _wrap(self, theta):
        return np.mod(theta, self.L) if self.closed else np.clip(theta, 0.0, self.L)

    def position(self, theta):
        t = self._wrap(theta)
        return np.stack([self._sx(t), self._sy(t)], axis=-1)

    def derivative(self, theta):
        t = self._wrap(theta)
        return np.stack([self._dsx(t), self._dsy(t)], axis=-1)

    def second_derivative(self, theta):
        t = self._wrap(theta)
        return np.stack([self._ddsx(t), self._ddsy(t)], axis=-1)

    def tangent_angle(self, theta):
        d = self.derivative(theta)
        return np.arctan2(d[..., 1], d[..., 0])

    def tangent_angles_unwrapped(self, thetas) -> np.ndarray:
        """Tangent angles along a horizon, continuous (no 2*pi jumps)."""
        return np.unwrap(np.atleast_1d(self.tangent_angle(thetas)))

    def tangent_angle_rate(self, theta):
        """d(Phi)/d(theta) = (X'Y'' - Y'X'') / |(X', Y')|^2."""
        d = self.derivative(theta)
        dd = self.second_derivative(theta)
        return (d[..., 0] * dd[..., 1] - d[..., 1] * dd[..., 0]) / np.sum(d * d, axis=-1)


class TrackGeometry:
    """Center line with per-point half width; closed or open."""

    def __init__(self, points, half_width, closed: bool = True):
        points = np.asarray(points, dtype=float)
        if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] < 4:
            raise TrackError("need at least 4 center-line points")
        half_width = np.broadcast_to(np.asarray(half_width, dtype=float), (points.shape[0],)).copy()
        if np.any(half_width <= 0):
            raise TrackError("half widths must be positive")
        seg = np.diff(points, axis=0)
        if closed:
            seg = np.vstack([seg, points[0] - points[-1]])
        seg_len = np.linalg.norm(seg, axis=1)
        if np.any(seg_len < 1e-12):
            raise TrackError("repeated consecutive center-line points")
        self.points = points
        self.half_width = half_width
        self.closed = closed
        self._seg = seg
        self._seg_len = seg_len
        # knot arc lengths; refined to spline arc length on first spline use
        self._theta_knots = np.concatenate([[0.0], np.cumsum(seg_len)])

    @property
    def length(self) -> float:
        """Total center-line arc length."""
        return float(self._theta_knots[-1])

    @cached_property
    def spline(self) -> ArcSpline:
        spline = fit_spline(self)
        # align PWL knot stations with the spline's arc-length parameter
        self._theta_knots = spline.knots.copy()
        return spline

    def theta_of_vertex(self, i: int) -> float:
        return float(self._theta_knots[i])

    def half_width_at(self, theta) -> np.ndarray:
        t = np.mod(theta, self.length) if self.closed else np.clip(theta, 0.0, self.length)
        hw = np.append(self.half_width, self.half_width[0]) if self.closed else self.half_width
        return np.interp(t, self._theta_knots, hw)

    def save(self, path) -> None:
        lines = ["# rcracer track v1", f"closed = {int(self.closed)}", "# x y half_width"]
        for (x, y), w in zip(self.points, self.half_width):
            lines.append(f"{x:.8f} {y:.8f} {w:.6f}")
        Path(path).write_text("\n".join(lines) + "\n")

    @staticmethod
    def load(path) -> "TrackGeometry":
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith("# rcracer track v1"):
            raise TrackError("not a track file")
        closed = bool(int(lines[1].split("=", 1)[1]))
        rows = [tuple(map(float, ln.split())) for ln in lines[2:]
                if ln.strip() and not ln.startswith("#")]
        arr = np.array(rows)
        return TrackGeometry(arr[:, :2], arr[:, 2], closed=closed)


def _arc_lengths(sx: CubicSpline, sy: CubicSpline, knots: np.ndarray) -> np.ndarray:
    """Cumulative arc length at each knot via fixed Gauss-Legendre quadrature."""
    nodes, weights = np.polynomial.legendre.leggauss(5)
    dsx, dsy = sx.derivative(), sy.derivative()
    out = np.zeros(len(knots))
    for i in range(len(knots) - 1):
        a, b = knots[i], knots[i + 1]
        t = 0.5 * (b - a) * nodes + 0.5 * (a + b)
        speed = np.hypot(dsx(t), dsy(t))
        out[i + 1] = out[i] + 0.5 * (b - a) * np.sum(weights * speed)
    return out


def fit_spline(track: TrackGeometry) -> ArcSpline:
    """Cubic spline through the center-line points, parameterized by arc length.

    Fits in cumulative chord length first, measures the resulting arc
    lengths by quadrature, and refits with arc-length knots (one pass is
    enough at the shipped sampling density).
    """
    pts = track.points
    if track.closed:
        pts_aug = np.vstack([pts, pts[:1]])
        bc = "periodic"
    else:
        pts_aug = pts
        bc = "natural"
    chord = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts_aug, axis=0), axis=1))])
    sx = CubicSpline(chord, pts_aug[:, 0], bc_type=bc)
    sy = CubicSpline(chord, pts_aug[:, 1], bc_type=bc)
    knots = _arc_lengths(sx, sy, chord)
    sx = CubicSpline(knots, pts_aug[:, 0], bc_type=bc)
    sy = CubicSpline(knots, pts_aug[:, 1], bc_type=bc)
    return ArcSpline(knots, sx, sy, track.closed)


def project_pwl(track: TrackGeometry, X: float, Y: float) -> float:
    """Arc length of the closest point on the piecewise linear center line.

    Ties are broken toward smaller theta.
    """
    p = np.array([X, Y])
    a = track.points
    d = track._seg
    ll = track._seg_len ** 2
    t = np.clip(((p - a) * d).sum(axis=1) / ll, 0.0, 1.0)
    if not track.closed:
        t = t[:len(a) - 1]
        d = d[:len(a) - 1]
        aa = a[:-1]
    else:
        aa = a
    closest = aa + t[:, None] * d
    dist2 = np.sum((closest - p) ** 2, axis=1)
    i = int(np.argmin(dist2))
    theta = track._theta_knots[i] + t[i] * (track._theta_knots[i + 1] - track._theta_knots[i])
    if track.closed and theta >= track.length:
        theta -= track.length
    return float(theta)


def project_spline(spline: ArcSpline, X: float, Y: float, theta_init: float,
                   tol: float = 1e-10, max_iter: int = 30) -> float:
    """Locally refine the squared-distance minimizer on the spline.

    Newton iteration from theta_init; falls back to dense local sampling
    plus one polishing pass when Newton does not converge. The result is
    continuous with theta_init (not wrapped back into [0, L]).
    """
    p = np.array([X, Y])

    def grad_hess(th):
        r = spline.position(th) - p
        d = spline.derivative(th)
        dd = spline.second_derivative(th)
        return float(r @ d), float(d @ d + r @ dd)

    theta = float(theta_init)
    for _ in range(max_iter):
        g, h = grad_hess(theta)
        if abs(g) < tol:
            return theta
        if h <= 0:
            break
        step = -g / h
        step = np.clip(step, -spline.L / 8, spline.L / 8)
        theta += step
    # dense fallback around the initial guess
    cand = theta_init + np.linspace(-spline.L / 8, spline.L / 8, 2001)
    dist2 = np.sum((spline.position(cand) - p) ** 2, axis=1)
    theta = float(cand[np.argmin(dist2)])
    for _ in range(max_iter):
        g, h = grad_hess(theta)
        if abs(g) < tol or h <= 0:
            break
        theta -= np.clip(g / h, -spline.L / 200, spline.L / 200)
    return theta


def corridor_halfspaces(track: TrackGeometry, anchors, widths=None, centers=None) -> Corridor:
    """Build per-stage parallel halfspace slabs around center-line stations.

    For each anchor position the closest center-line station is found; the
    slab is normal to the local tangent, centered `centers[k]` to the left
    of the center line (0 by default) with half width `widths[k]` (the
    local track half width by default).
    """
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    N = anchors.shape[0]
    widths_arr = None if widths is None else np.broadcast_to(np.asarray(widths, float), (N,))
    centers_arr = np.zeros(N) if centers is None else np.broadcast_to(np.asarray(centers, float), (N,))
    spline = track.spline

    F = np.zeros((N, 2, 2))
    f = np.zeros((N, 2))
    thetas = np.zeros(N)
    cpts = np.zeros((N, 2))
    normals = np.zeros((N, 2))
    ws = np.zeros(N)
    for k, p in enumerate(anchors):
        theta = project_pwl(track, p[0], p[1])
        c = spline.position(theta)
        if np.linalg.norm(p - c) > 6.0 * float(track.half_width_at(theta)):
            raise TrackError(f"anchor {k} is more than 3 track widths from the center line")
        d = spline.derivative(theta)
        t = d / np.linalg.norm(d)
        n = np.array([-t[1], t[0]])
        w = float(track.half_width_at(theta)) if widths_arr is None else float(widths_arr[k])
        if w <= 0:
            raise TrackError(f"nonpositive slab width at stage {k}")
        center = c + centers_arr[k] * n
        F[k, 0] = n
        F[k, 1] = -n
        f[k, 0] = n @ center + w
        f[k, 1] = -(n @ center) + w
        thetas[k] = theta
        cpts[k] = center
        normals[k] = n
        ws[k] = w
    return Corridor(F=F, f=f, theta=thetas, center=cpts, normal=normals, width=ws)


def signed_lateral_offset(track: TrackGeometry, X: float, Y: float,
                          theta: float | None = None) -> float:
    """Signed distance from the center line (positive to the left of travel)."""
    if theta is None:
        theta = project_pwl(track, X, Y)
    spline = track.spline
    c = spline.position(theta)
    d = spline.derivative(theta)
    t = d / np.linalg.norm(d)
    n = np.array([-t[1], t[0]])
    return float(n @ (np.array([X, Y]) - c))


def corridor_bounds(track: TrackGeometry, corridor, margin: float = 0.0):
    """Center/width lookups by arc length for a planner corridor.

    `corridor` is None (full track width) or a (theta, centers, widths)
    triple; both callables accept scalar or array theta.
    """
    L = track.length
    def shrink(w):
        # never let the margin close a narrow gap completely
        return w - np.minimum(margin, 0.5 * w)

    if corridor is None:
        return (lambda th: np.zeros_like(np.asarray(th, dtype=float)),
                lambda th: shrink(track.half_width_at(th)))
    c_theta, c_center, c_width = corridor
    order = np.argsort(c_theta)
    ct = np.asarray(c_theta, dtype=float)[order]
    cc = np.asarray(c_center, dtype=float)[order]
    cw = np.asarray(c_width, dtype=float)[order]

    def slab(th):
        # conservative between-station lookup: intersect the slabs of the
        # two bracketing stations so interpolation never widens past an
        # obstacle edge
        th = np.mod(np.asarray(th, dtype=float), L)
        scalar = th.ndim == 0
        th = np.atleast_1d(th)
        idx = np.searchsorted(ct, th)
        left = np.clip(idx - 1, 0, ct.size - 1)
        right = np.clip(idx, 0, ct.size - 1)
        lo = np.maximum(cc[left] - cw[left], cc[right] - cw[right])
        hi = np.minimum(cc[left] + cw[left], cc[right] + cw[right])
        hi = np.maximum(hi, lo)
        center = 0.5 * (lo + hi)
        width = 0.5 * (hi - lo)
        if scalar:
            return float(center[0]), float(width[0])
        return center, width

    return (lambda th: slab(th)[0], lambda th: shrink(slab(th)[1]))


# --- default synthetic circuit -------------------------------------------
# Closed circuit of length 18.43 m: two long straights, a 180 degree
# hairpin finger and a chicane, built from straight/arc segments. The two
# free lengths below close the loop exactly at the target length.
_HAIRPIN_LEG = 1.2752769016503436
_CHICANE_LEAD = 0.4375644347017726
DEFAULT_HALF_WIDTH = 0.19


def _segment_points(segments, ds: float) -> np.ndarray:
    x, y, h = 0.0, 0.0, 0.0
    pts = [(x, y)]
    for kind, *args in segments:
        if kind == "s":
            (length,) = args
            n = max(1, int(round(length / ds)))
            for _ in range(n):
                x += (length / n) * np.cos(h)
                y += (length / n) * np.sin(h)
                pts.append((x, y))
        else:
            r, ang = args
            n = max(1, int(round(abs(ang) * r / ds)))
            dh = ang / n
            for _ in range(n):
                x += 2 * r * np.sin(abs(dh) / 2) * np.cos(h + dh / 2)
                y += 2 * r * np.sin(abs(dh) / 2) * np.sin(h + dh / 2)
                h += dh
                pts.append((x, y))
    return np.array(pts)


def make_default_track(half_width: float = DEFAULT_HALF_WIDTH, ds: float = 0.03) -> TrackGeometry:
    """The shipped race track (counter-clockwise, start on the main straight)."""
    segs = [
        ("s", 2.6), ("a", 0.45, np.pi / 2), ("s", 1.4), ("a", 0.45, np.pi / 2),
        ("s", 1.0), ("a", 0.35, -np.pi / 2), ("s", _HAIRPIN_LEG),
        ("a", 0.35, np.pi), ("s", _HAIRPIN_LEG), ("a", 0.35, -np.pi / 2),
        ("s", 2.2), ("a", 0.45, np.pi / 2), ("s", 1.4), ("a", 0.45, np.pi / 2),
        ("s", _CHICANE_LEAD), ("a", 0.35, -np.pi / 3), ("a", 0.35, 2 * np.pi / 3),
        ("a", 0.35, -np.pi / 3), ("s", 0.35),
    ]
    pts = _segment_points(segs, ds)
    # drop the closing duplicate of the start point
    if np.linalg.norm(pts[-1] - pts[0]) < 1e-9:
        pts = pts[:-1]
    return TrackGeometry(pts, half_width, closed=True)


__all__ = [
    "TrackGeometry", "ArcSpline", "Corridor", "TrackError", "fit_spline",
    "project_pwl", "project_spline", "corridor_halfspaces", "corridor_bounds",
    "signed_lateral_offset", "make_default_track", "DEFAULT_HALF_WIDTH",
]
