"""Corridor planner tests: DP optimality oracle and footprint exclusion."""

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcracer.corridor import (CorridorError, Obstacle, build_grid,
                              enumerate_paths_cost, extract_corridor,
                              solve_dp)
from rcracer.track import make_default_track

TRACK = make_default_track()
SP = TRACK.spline


def stations(theta0, n, step=0.08):
    return SP.position(theta0 + step * np.arange(n))


def place(theta, off, radius=0.07):
    c = SP.position(theta)
    d = SP.derivative(theta)
    t = d / np.linalg.norm(d)
    n = np.array([-t[1], t[0]])
    p = c + off * n
    return Obstacle(float(p[0]), float(p[1]), radius)


def test_obstacle_requires_positive_radius():
    with pytest.raises(ValueError):
        Obstacle(0.0, 0.0, 0.0)


def test_grid_shapes():
    grid = build_grid(stations(1.0, 10), TRACK, (), n_lateral=7)
    assert grid.n_layers == 10
    assert grid.n_lateral == 7
    assert grid.positions.shape == (10, 7, 2)
    assert not grid.blocked.any()


def test_fully_blocked_layer_raises():
    ob = place(1.4, 0.0, radius=0.5)
    with pytest.raises(CorridorError):
        build_grid(stations(1.2, 6), TRACK, (ob,))


def test_no_obstacles_path_stays_on_centerline():
    grid = build_grid(stations(2.0, 12), TRACK, ())
    plan = solve_dp(grid, np.zeros(12))
    np.testing.assert_allclose(plan.offsets, 0.0, atol=1e-12)


def test_blocked_left_passes_right():
    ob = place(2.4, 0.10, radius=0.12)
    grid = build_grid(stations(2.0, 12), TRACK, (ob,))
    plan = solve_dp(grid, np.zeros(12))
    near = np.abs(grid.theta - 2.4) < 0.1
    assert np.all(plan.offsets[near] < 0)


def test_dp_matches_enumeration_on_random_grids():
    rng = np.random.default_rng(0)
    for _ in range(120):
        n = int(rng.integers(3, 9))
        m = int(rng.integers(3, 8))
        theta0 = rng.uniform(0, TRACK.length)
        grid = build_grid(stations(theta0, n), TRACK, (), n_lateral=m)
        blocked = rng.random((n, m)) < 0.25
        blocked[:, m // 2] &= rng.random(n) < 0.5  # keep it mostly solvable
        grid = type(grid)(theta=grid.theta, offsets=grid.offsets,
                          positions=grid.positions, blocked=blocked,
                          half_width=grid.half_width, obstacles=())
        prev = rng.uniform(-0.1, 0.1, n)
        oracle = enumerate_paths_cost(grid, prev)
        if np.all(blocked[0]) or oracle is None:
            with pytest.raises(CorridorError):
                solve_dp(grid, prev)
            continue
        plan = solve_dp(grid, prev)
        assert plan.cost == pytest.approx(oracle, abs=1e-12)


def test_corridor_full_width_without_obstacles():
    grid = build_grid(stations(0.5, 8), TRACK, ())
    plan = solve_dp(grid, np.zeros(8))
    centers, widths = extract_corridor(plan, TRACK)
    np.testing.assert_allclose(centers, 0.0, atol=1e-12)
    np.testing.assert_allclose(widths, grid.half_width, atol=1e-12)


def test_corridor_shifts_away_from_obstacle():
    ob = place(2.4, 0.10, radius=0.08)
    grid = build_grid(stations(2.0, 12), TRACK, (ob,))
    plan = solve_dp(grid, np.zeros(12))
    centers, widths = extract_corridor(plan, TRACK)
    near = np.abs(grid.theta - 2.4) < 0.05
    assert np.any(near)
    assert np.all(centers[near] < 0)
    # the slab stays clear of the blocked interval on the left
    from rcracer.corridor import _blocked_intervals
    for k in np.flatnonzero(near):
        for lo, _hi in _blocked_intervals(TRACK, grid.theta[k], (ob,)):
            assert centers[k] + widths[k] <= lo + 1e-9


@given(st.floats(0.0, 18.0), st.floats(-0.12, 0.12),
       st.floats(0.03, 0.10), st.integers(0, 1000))
@settings(max_examples=80, deadline=None)
def test_corridor_excludes_footprint(theta_ob, off, radius, seed):
    """Extracted slabs never overlap the footprint cross-section."""
    ob = place(theta_ob, off, radius)
    rng = np.random.default_rng(seed)
    theta0 = theta_ob - rng.uniform(0.2, 0.5)
    try:
        grid = build_grid(stations(theta0, 12, step=0.07), TRACK, (ob,))
        plan = solve_dp(grid, np.zeros(12))
    except CorridorError:
        return
    centers, widths = extract_corridor(plan, TRACK)
    for k in range(grid.n_layers):
        c = SP.position(grid.theta[k])
        d = SP.derivative(grid.theta[k])
        t = d / np.linalg.norm(d)
        n = np.array([-t[1], t[0]])
        rel = ob.position - c
        b = float(n @ rel)
        h2 = float(rel @ rel) - b * b
        gap2 = radius ** 2 - h2
        if gap2 <= 0:
            continue
        half = np.sqrt(gap2)
        lo, hi = b - half, b + half
        slab_lo = centers[k] - widths[k]
        slab_hi = centers[k] + widths[k]
        assert slab_hi <= lo + 1e-9 or slab_lo >= hi - 1e-9


def test_plan_positions_on_track():
    grid = build_grid(stations(4.0, 10), TRACK, ())
    plan = solve_dp(grid, np.zeros(10))
    assert plan.positions.shape == (10, 2)
    assert plan.node_index.shape == (10,)


def test_start_anchors_first_layer():
    grid = build_grid(stations(4.0, 10), TRACK, ())
    target = grid.offsets[0, 1]
    plan = solve_dp(grid, np.zeros(10), start=float(target) + 0.001,
                    w_start=10.0)
    assert plan.node_index[0] == 1
    # anchored enumeration agrees with the anchored DP
    cost = enumerate_paths_cost(grid, np.zeros(10),
                                start=float(target) + 0.001, w_start=10.0)
    assert plan.cost == pytest.approx(cost, abs=1e-12)


def test_start_anchor_avoids_blocked_node():
    grid = build_grid(stations(4.0, 10), TRACK, ())
    blocked = grid.blocked.copy()
    blocked[0, 1] = True
    grid = replace(grid, blocked=blocked)
    plan = solve_dp(grid, np.zeros(10), start=float(grid.offsets[0, 1]),
                    w_start=10.0)
    assert plan.node_index[0] in (0, 2)
