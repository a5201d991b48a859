"""Hierarchical controller tests: trim selection, planning, tracking QP."""

import numpy as np
import pytest

from rcracer.hrhc import (HrhcConfig, HrhcController, SelectionParams,
                          build_tracking_qp, candidate_set, fallback, plan,
                          rollout)
from rcracer import qp as qpmod
from rcracer.steady_state import Region, build_trim_library
from rcracer.track import corridor_halfspaces, make_default_track, project_pwl
from rcracer.vehicle import ModelParams, VehicleState

P = ModelParams()
TRACK = make_default_track()
SEL = SelectionParams()


@pytest.fixture(scope="module")
def library():
    return build_trim_library(P)


def test_candidate_set_speed_window(library):
    cands = candidate_set(library, (1.75, 0.0, 0.0), SEL)
    normal = [t for t in library if abs(t.vy_bar) <= SEL.nu]
    expect = [t for t in normal if abs(1.75 - t.vx_bar) <= SEL.rho]
    for t in expect:
        assert t in cands
    for t in cands:
        if abs(t.vy_bar) <= SEL.nu:
            assert abs(1.75 - t.vx_bar) <= SEL.rho


def test_candidate_set_includes_matching_drift_trim(library):
    drift = next(t for t in library if t.region is Region.OVERSTEER)
    cands = candidate_set(
        library, (drift.vx_bar, drift.vy_bar, drift.omega_bar), SEL)
    assert drift in cands


def test_candidate_set_vacuous_thresholds(library):
    wide = SelectionParams(nu=SEL.nu, rho=1e9, sigma_x=1e9, sigma_y=1e9,
                           sigma_omega=1e9)
    assert len(candidate_set(library, (2.0, 0.0, 0.0), wide)) == len(library)


def test_rollout_shape_and_start(library):
    trim = list(library)[0]
    s = VehicleState(0.1, 0.2, 0.3, trim.vx_bar, 0, 0)
    poses = rollout(s, trim, SEL)
    assert poses.shape == (SEL.N + 1, 3)
    np.testing.assert_allclose(poses[0], [0.1, 0.2, 0.3])


def test_rollout_straight_trim_moves_straight(library):
    trim = next(t for t in library if t.delta_bar == 0.0 and t.vx_bar == 2.0)
    s = VehicleState(0.0, 0.0, 0.0, 2.0, 0, 0)
    poses = rollout(s, trim, SEL)
    np.testing.assert_allclose(poses[:, 1], 0.0, atol=1e-12)
    assert poses[-1, 0] == pytest.approx(2.0 * SEL.N * SEL.Td, rel=1e-9)


def _state_on_track(theta, speed):
    sp = TRACK.spline
    p = sp.position(theta)
    a = float(sp.tangent_angle(theta))
    return VehicleState(p[0], p[1], a, speed, 0.0, 0.0)


def test_plan_matches_enumeration_oracle(library):
    """The planner's winner equals brute-force maximal feasible progress."""
    from rcracer.hrhc import _path_violation, _progress
    from rcracer.track import corridor_bounds
    state = _state_on_track(2.0, 1.75)
    planned = plan(TRACK, state, library, SEL, margin=0.04, params=P)
    assert planned.feasible

    center_fn, width_fn = corridor_bounds(TRACK, None, 0.04)
    theta0 = project_pwl(TRACK, state.X, state.Y)
    best = -np.inf
    for trim in candidate_set(library, (1.75, 0.0, 0.0), SEL):
        poses = rollout(state, trim, SEL)
        if _path_violation(TRACK, poses, center_fn, width_fn) > 0:
            continue
        best = max(best, _progress(TRACK, theta0, poses[-1]))
    assert planned.theta_star == pytest.approx(best, abs=1e-12)


def test_plan_slow_start_picks_slow_trim(library):
    """A near-standstill start only admits trims inside the speed window."""
    state = _state_on_track(0.0, 0.3)
    planned = plan(TRACK, state, library, SEL, margin=0.04, params=P)
    assert abs(planned.trim.vx_bar - 0.3) <= SEL.rho


def test_fallback_used_when_nothing_fits(library):
    # heading straight at the border: no candidate rollout stays inside
    sp = TRACK.spline
    p = sp.position(1.0)
    a = float(sp.tangent_angle(1.0)) + np.pi / 2
    state = VehicleState(p[0], p[1], a, 2.5, 0.0, 0.0)
    planned = fallback(TRACK, state, library, SEL, margin=0.04, params=P)
    if not planned.feasible:
        assert planned.trim.vx_bar == min(t.vx_bar for t in library)


def test_drift_trims_only_via_sigma_filter(library):
    """A drift trim is planned only when it passes the drift windows."""
    state = _state_on_track(2.0, 1.75)
    planned = plan(TRACK, state, library, SEL, margin=0.04, params=P)
    if planned.trim.region is Region.OVERSTEER:
        t = planned.trim
        assert abs(state.vx - t.vx_bar) <= SEL.sigma_x
        assert abs(state.vy - t.vy_bar) <= SEL.sigma_y
        assert abs(state.omega - t.omega_bar) <= SEL.sigma_omega


def test_tracking_qp_zero_deviation_keeps_zero_slack(library):
    """Starting exactly on a feasible reference leaves slacks at zero."""
    state = _state_on_track(3.0, 1.5)
    planned = plan(TRACK, state, library, SEL, margin=0.04, params=P)
    thetas = np.array([project_pwl(TRACK, X, Y) for X, Y, _ in planned.poses])
    from rcracer.track import corridor_bounds
    center_fn, width_fn = corridor_bounds(TRACK, None, 0.0)
    slabs = corridor_halfspaces(TRACK, planned.poses[:, :2],
                                widths=width_fn(thetas),
                                centers=center_fn(thetas))
    prob = build_tracking_qp(planned, slabs, HrhcConfig().weights, state, P,
                             SEL.Td)
    sol = qpmod.solve(prob)
    assert sol.status == "optimal"
    slacks = [float(u[-1]) for u in sol.us]
    assert max(slacks) < 1e-6


def test_controller_step_is_deterministic(library):
    state = _state_on_track(5.0, 1.5)
    u1 = HrhcController(TRACK, library, P).step(state)
    u2 = HrhcController(TRACK, library, P).step(state)
    assert u1.d == u2.d and u1.delta == u2.delta


def test_controller_one_qp_per_step(library, monkeypatch):
    calls = []
    original = qpmod.solve

    def counting(qp, **kw):
        calls.append(1)
        return original(qp, **kw)

    monkeypatch.setattr("rcracer.hrhc.qpmod.solve", counting)
    ctrl = HrhcController(TRACK, library, P)
    ctrl.step(_state_on_track(5.0, 1.5))
    assert len(calls) == 1


def test_selection_params_validation():
    with pytest.raises(ValueError):
        SelectionParams(rho=-1.0)
    with pytest.raises(ValueError):
        SelectionParams(N=0)
