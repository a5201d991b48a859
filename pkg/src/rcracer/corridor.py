"""Obstacle-avoidance corridor planning.

A shortest-path dynamic program on a spatial-temporal grid decides on
which side to pass each obstacle. Grid stations are frozen from the
previous plan's predicted positions; lateral nodes span the track width
and are blocked where an inflated obstacle footprint covers them. The
chosen path is widened into per-stage slabs for the controllers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .track import TrackGeometry, project_pwl

DEFAULT_N_LATERAL = 9
DEFAULT_W_DIST = 1.0
DEFAULT_W_DEV = 0.1
DEFAULT_W_START = 2.0


class CorridorError(RuntimeError):
    pass


@dataclass(frozen=True)
class Obstacle:
    """Static opponent, circumscribed and inflated by the ego half width."""

    x: float
    y: float
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("obstacle radius must be positive")

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class STGrid:
    """Spatial-temporal grid: N layers of M lateral nodes each."""

    theta: np.ndarray       # (N,) station arc lengths
    offsets: np.ndarray     # (N, M) signed lateral offsets
    positions: np.ndarray   # (N, M, 2) node world positions
    blocked: np.ndarray     # (N, M) bool
    half_width: np.ndarray  # (N,)
    obstacles: tuple = ()   # footprints the grid was blocked against

    @property
    def n_layers(self) -> int:
        return self.theta.shape[0]

    @property
    def n_lateral(self) -> int:
        return self.offsets.shape[1]


@dataclass(frozen=True)
class CorridorPlan:
    """DP result: one node per layer plus the grid it lives on."""

    grid: STGrid
    node_index: np.ndarray  # (N,) int
    cost: float

    @property
    def offsets(self) -> np.ndarray:
        return self.grid.offsets[np.arange(self.grid.n_layers), self.node_index]

    @property
    def positions(self) -> np.ndarray:
        return self.grid.positions[np.arange(self.grid.n_layers), self.node_index]


def build_grid(prev_positions, track: TrackGeometry, obstacles,
               n_lateral: int = DEFAULT_N_LATERAL) -> STGrid:
    """Grid the track cross-sections at the previous plan's stations.

    A node is blocked when it lies inside any obstacle footprint. A fully
    blocked layer raises CorridorError (the track is shut at that station).
    """
    prev_positions = np.atleast_2d(np.asarray(prev_positions, dtype=float))
    N = prev_positions.shape[0]
    if n_lateral < 2:
        raise ValueError("need at least 2 lateral nodes")
    spline = track.spline
    theta = np.array([project_pwl(track, p[0], p[1]) for p in prev_positions])
    hw = track.half_width_at(theta)
    offsets = np.linspace(-1.0, 1.0, n_lateral)[None, :] * hw[:, None]
    centers = spline.position(theta)
    d = spline.derivative(theta)
    tang = d / np.linalg.norm(d, axis=1, keepdims=True)
    normals = np.stack([-tang[:, 1], tang[:, 0]], axis=1)
    positions = centers[:, None, :] + offsets[:, :, None] * normals[:, None, :]
    blocked = np.zeros((N, n_lateral), dtype=bool)
    # each node stands for a lateral cell of one spacing; block it when the
    # footprint reaches into that cell, not just when it covers the node
    spacing = 2.0 * hw / (n_lateral - 1)
    for ob in obstacles:
        dist = np.linalg.norm(positions - ob.position, axis=2)
        blocked |= dist <= ob.radius + 0.5 * spacing[:, None]
    full = np.all(blocked, axis=1)
    if np.any(full):
        raise CorridorError(f"layer {int(np.argmax(full))} fully blocked")
    return STGrid(theta=theta, offsets=offsets, positions=positions,
                  blocked=blocked, half_width=hw, obstacles=tuple(obstacles))


def solve_dp(grid: STGrid, prev_offsets, w_dist: float = DEFAULT_W_DIST,
             w_dev: float = DEFAULT_W_DEV, start: float | None = None,
             w_start: float = DEFAULT_W_START) -> CorridorPlan:
    """Backward shortest path over the grid.

    Transitions are limited to the same or an adjacent lateral node per
    layer. Edge cost is w_dist times the Euclidean step length plus w_dev
    times the deviation of the target node from the previous plan's
    offset; the first layer pays its own deviation term. Ties are broken
    toward the center line.

    When `start` is given, first-layer nodes additionally pay w_start
    times their distance from that lateral offset. Without it the pure
    shortest path tends to hug the inside border, which a real car
    positioned elsewhere cannot reach in time.
    """
    prev_offsets = np.broadcast_to(np.asarray(prev_offsets, dtype=float),
                                   (grid.n_layers,))
    N, M = grid.n_layers, grid.n_lateral
    INF = np.inf
    value = np.full((N, M), INF)
    nxt = np.zeros((N, M), dtype=int)
    value[N - 1] = np.where(grid.blocked[N - 1], INF,
                            w_dev * np.abs(grid.offsets[N - 1] - prev_offsets[N - 1]))
    for k in range(N - 2, -1, -1):
        for j in range(M):
            if grid.blocked[k, j]:
                continue
            best = INF
            best_j = -1
            best_tie = INF
            for jn in (j - 1, j, j + 1):
                if jn < 0 or jn >= M or grid.blocked[k + 1, jn]:
                    continue
                step = np.linalg.norm(grid.positions[k + 1, jn] - grid.positions[k, j])
                cand = w_dist * step + value[k + 1, jn]
                tie = abs(grid.offsets[k + 1, jn])
                if cand < best - 1e-12 or (cand < best + 1e-12 and tie < best_tie):
                    best, best_j, best_tie = cand, jn, tie
            if best_j >= 0:
                value[k, j] = best + w_dev * abs(grid.offsets[k, j] - prev_offsets[k])
                nxt[k, j] = best_j
    start_vals = value[0] + 0.0
    if start is not None:
        start_vals = start_vals + w_start * np.abs(grid.offsets[0] - start)
    if not np.any(np.isfinite(start_vals)):
        raise CorridorError("no feasible path through the grid")
    order = sorted(range(M), key=lambda j: (start_vals[j], abs(grid.offsets[0, j])))
    j0 = order[0]
    path = [j0]
    for k in range(N - 1):
        path.append(int(nxt[k, path[-1]]))
    return CorridorPlan(grid=grid, node_index=np.array(path),
                        cost=float(start_vals[j0]))


def _blocked_intervals(track: TrackGeometry, theta: float, obstacles):
    """Lateral intervals covered by obstacle footprints at one station."""
    spline = track.spline
    c = spline.position(theta)
    d = spline.derivative(theta)
    t = d / np.linalg.norm(d)
    n = np.array([-t[1], t[0]])
    out = []
    for ob in obstacles:
        rel = ob.position - c
        b = float(n @ rel)
        h2 = float(rel @ rel) - b * b
        gap2 = ob.radius ** 2 - h2
        if gap2 > 0.0:
            half = np.sqrt(gap2)
            out.append((b - half, b + half))
    return out


def extract_corridor(plan: CorridorPlan, track: TrackGeometry):
    """Per-stage slab (center offset, half width) around the DP path.

    The slab is the maximal symmetric interval around the chosen node
    that stays clear of every obstacle footprint (computed exactly from
    the circle cross-sections, not the node discretization), clipped to
    the track borders; the returned center is the midpoint of the
    clipped interval.
    """
    grid = plan.grid
    N = grid.n_layers
    centers = np.zeros(N)
    widths = np.zeros(N)
    for k in range(N):
        j = plan.node_index[k]
        o = grid.offsets[k, j]
        w_sym = np.inf
        for lo_b, hi_b in _blocked_intervals(track, grid.theta[k], grid.obstacles):
            if o < lo_b:
                w_sym = min(w_sym, lo_b - o)
            elif o > hi_b:
                w_sym = min(w_sym, o - hi_b)
            else:
                w_sym = 0.0  # node grazing a footprint boundary
        lo = max(o - w_sym, -grid.half_width[k])
        hi = min(o + w_sym, grid.half_width[k])
        centers[k] = 0.5 * (lo + hi)
        widths[k] = 0.5 * (hi - lo)
    return centers, widths


def enumerate_paths_cost(grid: STGrid, prev_offsets, w_dist: float = DEFAULT_W_DIST,
                         w_dev: float = DEFAULT_W_DEV, start: float | None = None,
                         w_start: float = DEFAULT_W_START):
    """Brute-force minimum path cost (oracle for small grids), or None."""
    prev_offsets = np.broadcast_to(np.asarray(prev_offsets, dtype=float),
                                   (grid.n_layers,))
    N, M = grid.n_layers, grid.n_lateral
    best = [None]

    def rec(k, j, acc):
        acc = acc + w_dev * abs(grid.offsets[k, j] - prev_offsets[k])
        if k == N - 1:
            if best[0] is None or acc < best[0]:
                best[0] = acc
            return
        for jn in (j - 1, j, j + 1):
            if 0 <= jn < M and not grid.blocked[k + 1, jn]:
                step = np.linalg.norm(grid.positions[k + 1, jn] - grid.positions[k, j])
                rec(k + 1, jn, acc + w_dist * step)

    for j0 in range(M):
        if not grid.blocked[0, j0]:
            acc0 = 0.0 if start is None \
                else w_start * abs(grid.offsets[0, j0] - start)
            rec(0, j0, acc0)
    return best[0]


__all__ = [
    "Obstacle", "STGrid", "CorridorPlan", "CorridorError", "build_grid",
    "solve_dp", "extract_corridor", "enumerate_paths_cost",
    "DEFAULT_N_LATERAL", "DEFAULT_W_DIST", "DEFAULT_W_DEV",
]
