"""Solver tests against dense convex-optimization oracles."""

import numpy as np
import pytest

from rcracer import qp as qpmod

cvxpy = pytest.importorskip("cvxpy")


def random_multistage(rng, N=None, nx=None, nu=None, with_ineq=True,
                      soft_frac=0.0):
    """A random strictly convex multistage QP with feasible dynamics."""
    N = N if N is not None else rng.integers(2, 8)
    nx = nx if nx is not None else rng.integers(1, 4)
    nu = nu if nu is not None else rng.integers(1, 3)
    stages = []
    for k in range(N + 1):
        nuk = nu if k < N else 0
        M = rng.normal(size=(nx + nuk, nx + nuk))
        Phi = M @ M.T + (nx + nuk) * np.eye(nx + nuk)
        Q = Phi[:nx, :nx]
        R = Phi[nx:, nx:]
        S = Phi[nx:, :nx]
        q = rng.normal(size=nx)
        r = rng.normal(size=nuk)
        A = B = c = None
        if k < N:
            A = rng.normal(size=(nx, nx)) * 0.5
            B = rng.normal(size=(nx, nuk))
            c = rng.normal(size=nx) * 0.1
        if with_ineq:
            ni = int(rng.integers(1, 4))
            Cx = rng.normal(size=(ni, nx))
            Cu = rng.normal(size=(ni, nuk))
            # keep the origin-ish region feasible
            e = rng.uniform(1.0, 3.0, size=ni)
            soft = rng.random(ni) < soft_frac
        else:
            Cx, Cu = np.zeros((0, nx)), np.zeros((0, nuk))
            e = np.zeros(0)
            soft = np.zeros(0, dtype=bool)
        stages.append(qpmod.QPStage(Q=Q, R=R, S=S, q=q, r=r, A=A, B=B, c=c,
                                    Cx=Cx, Cu=Cu, e=e, soft=soft))
    x0 = rng.normal(size=nx) * 0.3
    return qpmod.MultistageQP(stages, x0)


def oracle_solve(qp):
    """Dense cvxpy reference solution, or None when infeasible.

    Random constraint data can produce primal-infeasible instances; the
    oracle decides which ones those are.
    """
    H, h, Aeq, beq, G, g = qpmod.to_dense(qp)
    z = cvxpy.Variable(H.shape[0])
    obj = 0.5 * cvxpy.quad_form(z, cvxpy.psd_wrap(H)) + h @ z
    cons = [Aeq @ z == beq]
    if G.shape[0]:
        cons.append(G @ z <= g)
    prob = cvxpy.Problem(cvxpy.Minimize(obj), cons)
    prob.solve(solver=cvxpy.CLARABEL)
    if prob.status != "optimal":
        return None
    return np.asarray(z.value), float(prob.value)


def stack(qp, xs, us):
    parts = []
    for st, x, u in zip(qp.stages, xs, us):
        parts.append(np.asarray(x))
        parts.append(np.asarray(u)[:st.nu])
    return np.concatenate(parts)


def test_random_instances_match_oracle():
    rng = np.random.default_rng(0)
    solved = 0
    for _ in range(60):
        qp = random_multistage(rng)
        ref = oracle_solve(qp)
        if ref is None:
            continue  # infeasible draw
        z_ref, val_ref = ref
        sol = qpmod.solve(qp, eq_tol=1e-7, ineq_tol=1e-7, gap_tol=1e-8,
                          max_iter=100)
        assert sol.status == "optimal"
        z = stack(qp, sol.xs, sol.us)
        np.testing.assert_allclose(z, z_ref, atol=1e-5)
        assert abs(sol.objective - val_ref) < 1e-5
        solved += 1
    assert solved >= 55


def test_equality_only_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        qp = random_multistage(rng, with_ineq=False)
        sol = qpmod.solve(qp)
        z_ref, _ = oracle_solve(qp)  # always feasible without inequalities
        np.testing.assert_allclose(stack(qp, sol.xs, sol.us), z_ref, atol=1e-5)


def test_lqr_matches_riccati_closed_form():
    """Unconstrained LQR: compare against the classic backward recursion."""
    rng = np.random.default_rng(2)
    nx, nu, N = 3, 2, 12
    A = rng.normal(size=(nx, nx)) * 0.6
    B = rng.normal(size=(nx, nu))
    Q = np.eye(nx)
    R = 0.5 * np.eye(nu)
    stages = []
    for k in range(N + 1):
        nuk = nu if k < N else 0
        stages.append(qpmod.QPStage(
            Q=Q.copy(), R=R[:nuk, :nuk].copy(), S=np.zeros((nuk, nx)),
            q=np.zeros(nx), r=np.zeros(nuk),
            A=A.copy() if k < N else None, B=B.copy() if k < N else None,
            c=np.zeros(nx) if k < N else None))
    x0 = np.array([1.0, -0.5, 0.2])
    sol = qpmod.solve(qpmod.MultistageQP(stages, x0))

    P = Q.copy()
    gains = []
    for _ in range(N):
        K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + A.T @ P @ (A - B @ K)
        gains.append(K)
    gains.reverse()
    x = x0.copy()
    for k in range(N):
        u = -gains[k] @ x
        np.testing.assert_allclose(sol.us[k], u, atol=1e-8)
        np.testing.assert_allclose(sol.xs[k], x, atol=1e-8)
        x = A @ x + B @ u


def test_box_clipping_single_stage():
    st = qpmod.QPStage(
        Q=np.array([[2.0]]), R=np.zeros((0, 0)), S=np.zeros((0, 1)),
        q=np.array([-4.0]), r=np.zeros(0))
    qp = qpmod.MultistageQP([st], np.array([0.0]))
    # x0 fixed: a one-stage problem is fully determined by x0
    sol = qpmod.solve(qp)
    assert sol.status == "optimal"
    np.testing.assert_allclose(sol.xs[0], [0.0], atol=1e-9)


def test_kkt_residuals_within_tolerance():
    rng = np.random.default_rng(3)
    for _ in range(10):
        qp = random_multistage(rng)
        sol = qpmod.solve(qp, eq_tol=1e-7, ineq_tol=1e-7, gap_tol=1e-8)
        assert sol.eq_residual <= 1e-7
        assert sol.ineq_residual <= 1e-7
        assert sol.gap <= 1e-8


def test_exact_penalty_reproduces_hard_solution():
    rng = np.random.default_rng(4)
    checked = 0
    for _ in range(50):
        qp = random_multistage(rng, with_ineq=True)
        hard = qpmod.solve(qp, eq_tol=1e-8, ineq_tol=1e-8, gap_tol=1e-9,
                           max_iter=100)
        if hard.status != "optimal":
            continue
        # mark every row soft and penalize above the max dual
        rho = 10.0 * max(1.0, max(np.max(l) if len(l) else 0.0 for l in hard.lam))
        for st in qp.stages:
            st.soft = np.ones(st.ni, dtype=bool)
        soft = qpmod.solve(qpmod.lower_soft_constraints(qp, rho),
                           eq_tol=1e-8, ineq_tol=1e-8, gap_tol=1e-9,
                           max_iter=100)
        if soft.status != "optimal":
            continue
        slacks = [u[st.nu] for st, u in zip(qp.stages, soft.us) if st.ni]
        assert max(slacks) < 1e-6
        for k in range(len(qp.stages)):
            np.testing.assert_allclose(soft.xs[k], hard.xs[k], atol=1e-5)
        checked += 1
    assert checked >= 40


def test_infeasible_soft_problem_reports_violation():
    """Contradictory soft rows are absorbed by the slack, not a failure."""
    st0 = qpmod.QPStage(
        Q=np.eye(1), R=np.zeros((0, 0)), S=np.zeros((0, 1)),
        q=np.zeros(1), r=np.zeros(0),
        Cx=np.array([[1.0], [-1.0]]), Cu=np.zeros((2, 0)),
        e=np.array([1.0, -2.0]), soft=np.array([True, True]))
    qp = qpmod.MultistageQP([st0], np.array([0.0]))
    sol = qpmod.solve(qpmod.lower_soft_constraints(qp, 100.0))
    assert sol.status == "optimal"
    # x = 0 violates x >= 2 by 2, so the slack carries it
    assert sol.us[0][0] == pytest.approx(2.0, abs=1e-5)


def test_objective_scaling_leaves_argmin():
    rng = np.random.default_rng(6)
    qp = random_multistage(rng, N=5, nx=2, nu=1)
    sol1 = qpmod.solve(qp)
    for st in qp.stages:
        st.Q = 0.1 * st.Q
        st.R = 0.1 * st.R
        st.S = 0.1 * st.S
        st.q = 0.1 * st.q
        st.r = 0.1 * st.r
    sol2 = qpmod.solve(qp)
    for a, b in zip(sol1.xs, sol2.xs):
        np.testing.assert_allclose(a, b, atol=1e-4)


def test_solver_is_deterministic():
    rng = np.random.default_rng(7)
    qp = random_multistage(rng, N=6)
    s1 = qpmod.solve(qp)
    s2 = qpmod.solve(qp)
    assert s1.iterations == s2.iterations
    for a, b in zip(s1.xs, s2.xs):
        assert np.array_equal(a, b)


def test_dump_load_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    qp = random_multistage(rng, soft_frac=0.5)
    path = tmp_path / "qp.txt"
    qpmod.dump(qp, path)
    back = qpmod.load(path)
    assert back.N == qp.N
    np.testing.assert_array_equal(back.x0, qp.x0)
    for a, b in zip(qp.stages, back.stages):
        np.testing.assert_array_equal(a.Q, b.Q)
        np.testing.assert_array_equal(a.e, b.e)
        np.testing.assert_array_equal(a.soft, b.soft)
    s1, s2 = qpmod.solve(qp), qpmod.solve(back)
    for a, b in zip(s1.xs, s2.xs):
        np.testing.assert_array_equal(a, b)


def test_load_rejects_other_files(tmp_path):
    path = tmp_path / "no.txt"
    path.write_text("hello\n")
    with pytest.raises(qpmod.QPError):
        qpmod.load(path)


def test_benchmark_scaling_reports_linear_fit():
    def make(N):
        rng = np.random.default_rng(123)
        return random_multistage(rng, N=N, nx=2, nu=1)

    table = qpmod.benchmark_scaling(make, horizons=(4, 8, 16), reps=2)
    assert table["horizons"] == (4, 8, 16)
    assert len(table["mean_times"]) == 3
    assert all(t > 0 for t in table["mean_times"])
