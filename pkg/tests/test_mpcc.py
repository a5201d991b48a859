"""Contouring controller tests: error model, QP assembly, scaling."""

import numpy as np
import pytest

from rcracer import qp as qpmod
from rcracer.mpcc import (MpccConfig, MpccController, MpccWeights, NU, NX,
                          approx_errors, build_mpcc_qp, initialize_trajectory,
                          linearize_errors, scale_problem, shift_trajectory,
                          _stage_bounds)
from rcracer.track import corridor_bounds, corridor_halfspaces, make_default_track
from rcracer.vehicle import ModelParams, VehicleState

P = ModelParams()
TRACK = make_default_track()
SP = TRACK.spline
CFG = MpccConfig()


def _normal(theta):
    d = SP.derivative(theta)
    t = d / np.linalg.norm(d)
    return np.array([-t[1], t[0]])


def test_errors_vanish_on_reference():
    for th in (0.5, 3.0, 9.0, 14.0):
        p = SP.position(th)
        e_c, e_l = approx_errors(SP, p[0], p[1], th)
        assert abs(e_c) < 1e-12 and abs(e_l) < 1e-12


def test_contouring_error_sign_and_magnitude():
    th = 4.0
    off = 0.07
    p = SP.position(th) + off * _normal(th)
    e_c, e_l = approx_errors(SP, p[0], p[1], th)
    assert abs(abs(e_c) - off) < 1e-9
    assert abs(e_l) < 1e-9


def test_lag_error_measures_theta_mismatch():
    th = 6.0
    p = SP.position(th)
    e_c, e_l = approx_errors(SP, p[0], p[1], th - 0.05)
    # lagging theta_A behind the true projection shows up in e_l
    assert abs(e_l) > 0.03


def test_linearize_errors_matches_finite_differences():
    rng = np.random.default_rng(9)
    for _ in range(25):
        th = rng.uniform(0, TRACK.length)
        p = SP.position(th) + rng.uniform(-0.1, 0.1) * _normal(th)
        z = np.array([p[0], p[1], th + rng.uniform(-0.05, 0.05)])
        e0, J = linearize_errors(SP, z)
        eps = 1e-7
        for i in range(3):
            dz = np.zeros(3)
            dz[i] = eps
            ep = np.array(approx_errors(SP, *(z + dz)))
            em = np.array(approx_errors(SP, *(z - dz)))
            np.testing.assert_allclose(J[:, i], (ep - em) / (2 * eps),
                                       rtol=2e-4, atol=1e-6)
        np.testing.assert_allclose(e0, approx_errors(SP, *z), atol=1e-12)


def _controller_state(theta, speed):
    p = SP.position(theta)
    a = float(SP.tangent_angle(theta))
    return VehicleState(p[0], p[1], a, speed, 0.0, 0.0)


def _build(state, theta):
    prev = initialize_trajectory(state, theta, np.zeros(3), P, CFG)
    center_fn, width_fn = corridor_bounds(TRACK, None, CFG.margin)
    ths = np.mod(prev.xs[:, 6], TRACK.length)
    slabs = corridor_halfspaces(TRACK, prev.xs[:, :2],
                                widths=width_fn(ths), centers=center_fn(ths))
    prob = build_mpcc_qp(prev, state, theta, slabs, CFG.weights, CFG, P, SP)
    return prev, prob


def test_qp_dimensions():
    state = _controller_state(1.0, 1.5)
    prev, prob = _build(state, 1.0)
    assert prob.N == CFG.N
    for k, st in enumerate(prob.stages):
        assert st.nx == NX
        assert st.nu == (NU if k < CFG.N else 0)
    prob.validate()


def test_initialize_trajectory_consistent_with_dynamics():
    state = _controller_state(2.0, 1.5)
    prev = initialize_trajectory(state, 2.0, np.array([0.2, 0.0, 1.5]), P, CFG)
    assert prev.xs.shape == (CFG.N + 1, NX)
    assert prev.us.shape == (CFG.N, NU)
    np.testing.assert_allclose(prev.xs[0, :6], state.as_array())
    # theta advances by v * Ts each stage
    dth = np.diff(prev.xs[:, 6])
    np.testing.assert_allclose(dth, prev.us[:, 2] * CFG.Ts, atol=1e-12)


def test_shift_trajectory_moves_stages_forward():
    state = _controller_state(2.0, 1.5)
    prev = initialize_trajectory(state, 2.0, np.zeros(3), P, CFG)
    shifted = shift_trajectory(prev, P, CFG)
    np.testing.assert_array_equal(shifted.xs[: CFG.N], prev.xs[1:])
    np.testing.assert_array_equal(shifted.us[: CFG.N - 1], prev.us[1:])


def test_scale_problem_preserves_minimizer():
    """Solving the scaled problem and unscaling recovers the original optimum."""
    state = _controller_state(3.0, 1.8)
    prev, prob = _build(state, 3.0)
    lowered = qpmod.lower_soft_constraints(prob, CFG.weights.q)
    bounds = _stage_bounds(prev.xs, prev.us, P, CFG, TRACK.length)
    scaled, unscale = scale_problem(lowered, bounds)
    sol_s = qpmod.solve(scaled, eq_tol=1e-7, ineq_tol=1e-7, gap_tol=1e-8,
                        max_iter=100)
    assert sol_s.status == "optimal"
    xs_s, us_s = unscale(sol_s.xs, sol_s.us)

    cvxpy = pytest.importorskip("cvxpy")
    H, h, Aeq, beq, G, g = qpmod.to_dense(lowered)
    z = cvxpy.Variable(H.shape[0])
    obj = 0.5 * cvxpy.quad_form(z, cvxpy.psd_wrap(H)) + h @ z
    pr = cvxpy.Problem(cvxpy.Minimize(obj), [Aeq @ z == beq, G @ z <= g])
    pr.solve(solver=cvxpy.CLARABEL)
    assert pr.status == "optimal"
    zv = np.asarray(z.value)
    o = 0
    for k, st in enumerate(lowered.stages):
        x_ref = zv[o:o + st.nx]
        u_ref = zv[o + st.nx:o + st.nx + st.nu]
        np.testing.assert_allclose(xs_s[k][:6], x_ref[:6], atol=2e-3)
        if k < 3:
            np.testing.assert_allclose(us_s[k][:2], u_ref[:2], atol=2e-3)
        o += st.nx + st.nu
    assert abs(lowered.objective([np.asarray(x) for x in xs_s],
                                 [np.asarray(u) for u in us_s])
               - pr.value) < 1e-3 * max(1.0, abs(pr.value))


def test_weights_validation():
    with pytest.raises(ValueError):
        MpccWeights(gamma=-1.0)
    with pytest.raises(ValueError):
        MpccWeights(qc=500.0, ql=400.0)


def test_progress_bound_default():
    assert CFG.progress_bound(P) == pytest.approx(1.5 * P.vx_max)


def test_first_step_initializes_and_returns_input():
    ctrl = MpccController(TRACK, P)
    u = ctrl.step(_controller_state(0.0, 1.0))
    assert ctrl.prev is not None
    assert ctrl.recoveries >= 1
    assert P.d_min <= u.d <= P.d_max
    assert abs(u.delta) <= P.delta_max


def test_controller_step_deterministic():
    s = _controller_state(0.0, 1.0)
    u1 = MpccController(TRACK, P).step(s)
    u2 = MpccController(TRACK, P).step(s)
    assert u1.d == u2.d and u1.delta == u2.delta


def test_one_qp_per_step(monkeypatch):
    calls = []
    original = qpmod.solve

    def counting(qp, **kw):
        calls.append(1)
        return original(qp, **kw)

    monkeypatch.setattr("rcracer.mpcc.qpmod.solve", counting)
    MpccController(TRACK, P).step(_controller_state(0.0, 1.0))
    assert len(calls) == 1


def test_tracking_weights_reduce_contouring_error():
    """High-contouring weights track tighter than the racing weights."""
    def mean_ec(weights):
        cfg = MpccConfig(weights=weights)
        ctrl = MpccController(TRACK, P, cfg)
        s = _controller_state(0.0, 1.2)
        errs = []
        from rcracer.vehicle import integrate
        from rcracer.track import project_pwl, signed_lateral_offset
        for _ in range(150):
            u = ctrl.step(s)
            s = integrate(s, u, cfg.Ts, substeps=4, params=P)
            errs.append(abs(signed_lateral_offset(TRACK, s.X, s.Y)))
        return float(np.mean(errs))

    racing = mean_ec(MpccWeights())
    tracking = mean_ec(MpccWeights(qc=200.0, ql=400.0, gamma=0.05))
    assert tracking < racing
