"""Structure-exploiting multistage QP solver.

Solves convex QPs in optimal-control form

    min  sum_k 1/2 [x_k; u_k]' Phi_k [x_k; u_k] + phi_k' [x_k; u_k]
    s.t. x_0 fixed
         x_{k+1} = A_k x_k + B_k u_k + c_k
         Cx_k x_k + Cu_k u_k <= e_k

with a Mehrotra predictor-corrector interior point method. Each Newton
system is solved by a Riccati backward recursion, so the cost per
iteration is linear in the horizon length. State and input dimensions
may vary per stage; the terminal stage may carry inputs (used for soft
constraint slacks) even though it has no dynamics row.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

REGULARIZATION = 1e-8
STEP_FRACTION = 0.995


class QPError(RuntimeError):
    pass


@dataclass
class QPStage:
    """Cost, dynamics and inequality data for one stage."""

    Q: np.ndarray                 # (nx, nx)
    R: np.ndarray                 # (nu, nu)
    S: np.ndarray                 # (nu, nx) cross term
    q: np.ndarray                 # (nx,)
    r: np.ndarray                 # (nu,)
    A: np.ndarray | None = None   # (nx_next, nx), None at the last stage
    B: np.ndarray | None = None   # (nx_next, nu)
    c: np.ndarray | None = None   # (nx_next,)
    Cx: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    Cu: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    e: np.ndarray = field(default_factory=lambda: np.zeros(0))
    soft: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def nx(self) -> int:
        return self.Q.shape[0]

    @property
    def nu(self) -> int:
        return self.R.shape[0]

    @property
    def ni(self) -> int:
        return self.e.shape[0]

    def validate(self, nx_next: int | None) -> None:
        nx, nu, ni = self.nx, self.nu, self.ni
        assert self.S.shape == (nu, nx) and self.q.shape == (nx,) and self.r.shape == (nu,)
        if nx_next is not None:
            assert self.A is not None and self.A.shape == (nx_next, nx)
            assert self.B.shape == (nx_next, nu) and self.c.shape == (nx_next,)
        if ni:
            assert self.Cx.shape == (ni, nx) and self.Cu.shape == (ni, nu)
        assert self.soft.shape == (ni,)


@dataclass
class MultistageQP:
    stages: list
    x0: np.ndarray

    @property
    def N(self) -> int:
        """Number of dynamics intervals (stages are 0 .. N)."""
        return len(self.stages) - 1

    def validate(self) -> None:
        assert self.x0.shape == (self.stages[0].nx,)
        for k, st in enumerate(self.stages):
            st.validate(self.stages[k + 1].nx if k < self.N else None)

    def objective(self, xs, us) -> float:
        val = 0.0
        for st, x, u in zip(self.stages, xs, us):
            val += 0.5 * (x @ st.Q @ x + u @ st.R @ u) + u @ st.S @ x
            val += st.q @ x + st.r @ u
        return float(val)


@dataclass
class QPSolution:
    xs: list
    us: list
    lam: list          # inequality multipliers per stage
    nu: list           # dynamics multipliers, one per interval
    status: str
    iterations: int
    objective: float
    gap: float
    eq_residual: float
    ineq_residual: float
    solve_time: float


class _RiccatiFactor:
    """Backward value-function factorization, reusable for multiple rhs."""

    def __init__(self, qp: MultistageQP, Ws, reg: float):
        self.qp = qp
        N = qp.N
        self.Qb, self.Rb, self.Sb = [], [], []
        for st, W in zip(qp.stages, Ws):
            nx, nu = st.nx, st.nu
            Qb = st.Q + reg * np.eye(nx)
            Rb = st.R + reg * np.eye(nu)
            Sb = st.S.copy()
            if st.ni:
                Qb = Qb + (st.Cx.T * W) @ st.Cx
                Rb = Rb + (st.Cu.T * W) @ st.Cu
                Sb = Sb + (st.Cu.T * W) @ st.Cx
            self.Qb.append(Qb)
            self.Rb.append(Rb)
            self.Sb.append(Sb)

        self.P = [None] * (N + 1)
        self.K = [None] * (N + 1)
        self.Huu_inv = [None] * (N + 1)
        self.Hux = [None] * (N + 1)
        stN = qp.stages[N]
        if stN.nu:
            Huu = self.Rb[N]
            Hux = self.Sb[N]
            Huu_inv = np.linalg.inv(Huu)
            K = -Huu_inv @ Hux
            self.P[N] = self.Qb[N] + Hux.T @ K
            self.K[N], self.Huu_inv[N], self.Hux[N] = K, Huu_inv, Hux
        else:
            self.P[N] = self.Qb[N]
        for k in range(N - 1, -1, -1):
            st = qp.stages[k]
            Pn = self.P[k + 1]
            Huu = self.Rb[k] + st.B.T @ Pn @ st.B
            Hux = self.Sb[k] + st.B.T @ Pn @ st.A
            Huu_inv = np.linalg.inv(Huu)
            K = -Huu_inv @ Hux
            self.P[k] = self.Qb[k] + st.A.T @ Pn @ st.A + Hux.T @ K
            self.K[k], self.Huu_inv[k], self.Hux[k] = K, Huu_inv, Hux

    def solve(self, gx, gu, rd, dx0):
        """Solve the equality-constrained Newton system.

        min sum 1/2 d'Phi_bar d + [gx;gu]'d  s.t. dx_{k+1} = A dx + B du + rd_k,
        dx_0 = dx0. Returns (dxs, dus, dnus).
        """
        qp, N = self.qp, self.qp.N
        p = [None] * (N + 1)
        kff = [None] * (N + 1)
        stN = qp.stages[N]
        if stN.nu:
            kff[N] = -self.Huu_inv[N] @ gu[N]
            p[N] = gx[N] + self.Hux[N].T @ kff[N]
        else:
            p[N] = gx[N]
        for k in range(N - 1, -1, -1):
            st = qp.stages[k]
            w = p[k + 1] + self.P[k + 1] @ rd[k]
            hu = gu[k] + st.B.T @ w
            kff[k] = -self.Huu_inv[k] @ hu
            p[k] = gx[k] + st.A.T @ w + self.Hux[k].T @ kff[k]

        dxs = [np.asarray(dx0, dtype=float)]
        dus = []
        for k in range(N):
            du = self.K[k] @ dxs[k] + kff[k]
            dus.append(du)
            st = qp.stages[k]
            dxs.append(st.A @ dxs[k] + st.B @ du + rd[k])
        dus.append(self.K[N] @ dxs[N] + kff[N] if stN.nu else np.zeros(0))
        dnus = [self.P[k + 1] @ dxs[k + 1] + p[k + 1] for k in range(N)]
        return dxs, dus, dnus


def _residuals(qp: MultistageQP, xs, us, lams, nus):
    """Stationarity, dynamics and inequality residuals (stationarity in x_0
    is absorbed by the initial-condition multiplier and excluded)."""
    N = qp.N
    rx, ru, rd, ri = [], [], [], []
    for k, st in enumerate(qp.stages):
        gx = st.Q @ xs[k] + st.S.T @ us[k] + st.q
        gu = st.S @ xs[k] + st.R @ us[k] + st.r
        if st.ni:
            gx = gx + st.Cx.T @ lams[k]
            gu = gu + st.Cu.T @ lams[k]
        if k < N:
            gx = gx + st.A.T @ nus[k]
            gu = gu + st.B.T @ nus[k]
            rd.append(st.A @ xs[k] + st.B @ us[k] + st.c - xs[k + 1])
        if k > 0:
            gx = gx - nus[k - 1]
        rx.append(gx)
        ru.append(gu)
        ri.append(st.Cx @ xs[k] + st.Cu @ us[k] - st.e if st.ni else np.zeros(0))
    return rx, ru, rd, ri


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def solve(qp: MultistageQP, eq_tol: float = 1e-5, ineq_tol: float = 1e-5,
          gap_tol: float = 1e-4, max_iter: int = 50,
          reg: float = REGULARIZATION) -> QPSolution:
    """Interior point solve; raises QPError only on numerical breakdown."""
    t0 = time.perf_counter()
    N = qp.N
    stages = qp.stages
    m_total = sum(st.ni for st in stages)

    xs = [np.array(qp.x0, dtype=float)] + [np.zeros(st.nx) for st in stages[1:]]
    us = [np.zeros(st.nu) for st in stages]
    nus = [np.zeros(stages[k + 1].nx) for k in range(N)]
    lams = [np.ones(st.ni) for st in stages]
    slacks = [np.ones(st.ni) for st in stages]

    if m_total == 0:
        fac = _RiccatiFactor(qp, [np.zeros(0) for _ in stages], reg)
        rx, ru, rd, _ = _residuals(qp, xs, us, lams, nus)
        dxs, dus, dnus = fac.solve(rx, ru, rd, np.zeros(stages[0].nx))
        xs = [x + dx for x, dx in zip(xs, dxs)]
        us = [u + du for u, du in zip(us, dus)]
        nus = [n + dn for n, dn in zip(nus, dnus)]
        _, _, rd, _ = _residuals(qp, xs, us, lams, nus)
        eqres = max((float(np.max(np.abs(r))) for r in rd), default=0.0)
        return QPSolution(xs, us, lams, nus, "optimal", 1, qp.objective(xs, us),
                          0.0, eqres, 0.0, time.perf_counter() - t0)

    status = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        rx, ru, rd, ri = _residuals(qp, xs, us, lams, nus)
        mu = sum(float(s @ l) for s, l in zip(slacks, lams)) / m_total
        eqres = max((float(np.max(np.abs(r))) for r in rd), default=0.0)
        ineqres = max((float(np.max(ri[k])) if stages[k].ni else 0.0
                       for k in range(len(stages))), default=0.0)
        if eqres <= eq_tol and ineqres <= ineq_tol and mu <= gap_tol:
            status = "optimal"
            break

        Ws = [np.minimum(l / s, 1e14) for l, s in zip(lams, slacks)]
        try:
            fac = _RiccatiFactor(qp, Ws, reg)
        except np.linalg.LinAlgError:
            try:
                fac = _RiccatiFactor(qp, [np.minimum(W, 1e10) for W in Ws],
                                     max(reg, 1e-6))
            except np.linalg.LinAlgError:
                # scalings degenerated beyond repair; report the stall
                # instead of raising into the controller
                status = "max_iter"
                break

        def directions(rcs):
            gx, gu = [], []
            for k, st in enumerate(stages):
                gxk, guk = rx[k].copy(), ru[k].copy()
                if st.ni:
                    # eliminated slack and multiplier contributions
                    v = Ws[k] * (ri[k] + slacks[k]) - rcs[k] / slacks[k]
                    gxk += st.Cx.T @ v
                    guk += st.Cu.T @ v
                gx.append(gxk)
                gu.append(guk)
            dxs, dus, dnus = fac.solve(gx, gu, rd, np.zeros(stages[0].nx))
            dss, dls = [], []
            for k, st in enumerate(stages):
                if st.ni:
                    ds = -(ri[k] + slacks[k]) - st.Cx @ dxs[k] - st.Cu @ dus[k]
                    dl = -(rcs[k] + lams[k] * ds) / slacks[k]
                else:
                    ds, dl = np.zeros(0), np.zeros(0)
                dss.append(ds)
                dls.append(dl)
            return dxs, dus, dnus, dss, dls

        # predictor (affine scaling)
        rcs_aff = [l * s for l, s in zip(lams, slacks)]
        dxa, dua, dna, dsa, dla = directions(rcs_aff)
        ap = min(_max_step(slacks[k], dsa[k]) for k in range(len(stages)))
        ad = min(_max_step(lams[k], dla[k]) for k in range(len(stages)))
        mu_aff = sum(float((slacks[k] + ap * dsa[k]) @ (lams[k] + ad * dla[k]))
                     for k in range(len(stages))) / m_total
        sigma = (max(mu_aff, 0.0) / mu) ** 3 if mu > 0 else 0.0

        # corrector
        rcs = [lams[k] * slacks[k] + dsa[k] * dla[k] - sigma * mu
               for k in range(len(stages))]
        dxs, dus, dnus, dss, dls = directions(rcs)
        ap = min(_max_step(slacks[k], dss[k]) for k in range(len(stages)))
        ad = min(_max_step(lams[k], dls[k]) for k in range(len(stages)))
        ap = min(1.0, STEP_FRACTION * ap)
        ad = min(1.0, STEP_FRACTION * ad)

        xs = [x + ap * dx for x, dx in zip(xs, dxs)]
        us = [u + ap * du for u, du in zip(us, dus)]
        slacks = [s + ap * ds for s, ds in zip(slacks, dss)]
        nus = [n + ad * dn for n, dn in zip(nus, dnus)]
        lams = [l + ad * dl for l, dl in zip(lams, dls)]

        if any(np.any(~np.isfinite(x)) for x in xs) or not np.isfinite(mu):
            raise QPError("numerical breakdown in interior point iteration")

    rx, ru, rd, ri = _residuals(qp, xs, us, lams, nus)
    mu = sum(float(s @ l) for s, l in zip(slacks, lams)) / m_total
    eqres = max((float(np.max(np.abs(r))) for r in rd), default=0.0)
    ineqres = max((float(np.max(ri[k])) if stages[k].ni else 0.0
                   for k in range(len(stages))), default=0.0)
    return QPSolution(xs, us, lams, nus, status, it, qp.objective(xs, us),
                      mu, eqres, ineqres, time.perf_counter() - t0)


def lower_soft_constraints(qp: MultistageQP, rho: float) -> MultistageQP:
    """Exact-penalty reformulation of rows marked soft.

    Each stage with soft rows gets one extra nonnegative input (a shared
    slack); soft rows become Cx x + Cu u - slack <= e and the slack enters
    the cost linearly with weight rho, which is the infinity-norm exact
    penalty on the per-stage violation.
    """
    if rho <= 0:
        raise ValueError("penalty weight must be positive")
    out = []
    for k, st in enumerate(qp.stages):
        if not np.any(st.soft):
            out.append(st)
            continue
        nx, nu, ni = st.nx, st.nu, st.ni
        R = np.zeros((nu + 1, nu + 1))
        R[:nu, :nu] = st.R
        S = np.vstack([st.S, np.zeros((1, nx))])
        r = np.concatenate([st.r, [rho]])
        B = None if st.B is None else np.hstack([st.B, np.zeros((st.B.shape[0], 1))])
        Cu = np.hstack([st.Cu, np.where(st.soft, -1.0, 0.0)[:, None]])
        Cu = np.vstack([Cu, np.concatenate([np.zeros(nu), [-1.0]])])
        Cx = np.vstack([st.Cx, np.zeros((1, nx))])
        e = np.concatenate([st.e, [0.0]])
        out.append(QPStage(Q=st.Q, R=R, S=S, q=st.q, r=r, A=st.A, B=B, c=st.c,
                           Cx=Cx, Cu=Cu, e=e, soft=np.zeros(ni + 1, dtype=bool)))
    return MultistageQP(out, qp.x0)


def to_dense(qp: MultistageQP):
    """Stack into dense (H, h, Aeq, beq, G, g) over z = (x_0,u_0,...,x_N,u_N)."""
    offs = []
    n = 0
    for st in qp.stages:
        offs.append(n)
        n += st.nx + st.nu
    H = np.zeros((n, n))
    h = np.zeros(n)
    rows_eq = []
    beq = []
    rows_in = []
    g = []
    for k, st in enumerate(qp.stages):
        o = offs[k]
        nx, nu = st.nx, st.nu
        H[o:o + nx, o:o + nx] += st.Q
        H[o + nx:o + nx + nu, o + nx:o + nx + nu] += st.R
        H[o + nx:o + nx + nu, o:o + nx] += st.S
        H[o:o + nx, o + nx:o + nx + nu] += st.S.T
        h[o:o + nx] += st.q
        h[o + nx:o + nx + nu] += st.r
        if k == 0:
            for i in range(nx):
                row = np.zeros(n)
                row[o + i] = 1.0
                rows_eq.append(row)
                beq.append(qp.x0[i])
        if k < qp.N:
            nxn = qp.stages[k + 1].nx
            on = offs[k + 1]
            for i in range(nxn):
                row = np.zeros(n)
                row[o:o + nx] = st.A[i]
                row[o + nx:o + nx + nu] = st.B[i]
                row[on + i] = -1.0
                rows_eq.append(row)
                beq.append(-st.c[i])
        for i in range(st.ni):
            row = np.zeros(n)
            row[o:o + nx] = st.Cx[i]
            row[o + nx:o + nx + nu] = st.Cu[i]
            rows_in.append(row)
            g.append(st.e[i])
    Aeq = np.array(rows_eq) if rows_eq else np.zeros((0, n))
    G = np.array(rows_in) if rows_in else np.zeros((0, n))
    return H, h, Aeq, np.array(beq), G, np.array(g)


# --- text serialization ---------------------------------------------------

def _write_mat(lines, name, M):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    lines.append(f"{name} {M.shape[0]} {M.shape[1]}")
    for row in M:
        lines.append(" ".join(f"{v:.17g}" for v in row))


def dump(qp: MultistageQP, path) -> None:
    lines = ["# rcracer qp v1", f"N = {qp.N}"]
    _write_mat(lines, "x0", qp.x0[None, :])
    for k, st in enumerate(qp.stages):
        lines.append(f"stage {k} nx {st.nx} nu {st.nu} ni {st.ni}")
        _write_mat(lines, "Q", st.Q)
        _write_mat(lines, "R", st.R)
        _write_mat(lines, "S", st.S)
        _write_mat(lines, "q", st.q[None, :])
        _write_mat(lines, "r", st.r[None, :])
        if st.A is not None:
            _write_mat(lines, "A", st.A)
            _write_mat(lines, "B", st.B)
            _write_mat(lines, "c", st.c[None, :])
        if st.ni:
            _write_mat(lines, "Cx", st.Cx)
            _write_mat(lines, "Cu", st.Cu)
            _write_mat(lines, "e", st.e[None, :])
            lines.append("soft " + " ".join(str(int(v)) for v in st.soft))
    Path(path).write_text("\n".join(lines) + "\n")


def load(path) -> MultistageQP:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines[0].startswith("# rcracer qp v1"):
        raise QPError("not a qp dump file")
    pos = [1]

    def next_line():
        ln = lines[pos[0]]
        pos[0] += 1
        return ln

    N = int(next_line().split("=")[1])

    def read_mat(expect):
        parts = next_line().split()
        if parts[0] != expect:
            raise QPError(f"expected {expect}, got {parts[0]}")
        rows, cols = int(parts[1]), int(parts[2])
        if cols == 0:
            # zero-width rows serialize as blank lines, which are stripped
            return np.zeros((rows, 0))
        M = np.array([[float(v) for v in next_line().split()] for _ in range(rows)])
        return M.reshape(rows, cols)

    x0 = read_mat("x0").ravel()
    stages = []
    for k in range(N + 1):
        head = next_line().split()
        nx, nu, ni = int(head[3]), int(head[5]), int(head[7])
        Q = read_mat("Q")
        R = read_mat("R").reshape(nu, nu)
        S = read_mat("S").reshape(nu, nx)
        q = read_mat("q").ravel()
        r = read_mat("r").ravel()
        A = B = c = None
        if k < N:
            A = read_mat("A")
            B = read_mat("B").reshape(A.shape[0], nu)
            c = read_mat("c").ravel()
        if ni:
            Cx = read_mat("Cx").reshape(ni, nx)
            Cu = read_mat("Cu").reshape(ni, nu)
            e = read_mat("e").ravel()
            soft = np.array([bool(int(v)) for v in next_line().split()[1:]])
        else:
            Cx, Cu, e = np.zeros((0, nx)), np.zeros((0, nu)), np.zeros(0)
            soft = np.zeros(0, dtype=bool)
        stages.append(QPStage(Q=Q, R=R, S=S, q=q, r=r, A=A, B=B, c=c,
                              Cx=Cx, Cu=Cu, e=e, soft=soft))
    return MultistageQP(stages, x0)


def benchmark_scaling(make_qp, horizons=(10, 20, 40, 80), reps: int = 5, **solve_kw):
    """Mean solve time per horizon plus an R^2 of the linear fit through 0.

    `make_qp(N)` must return a fresh MultistageQP with horizon N.
    """
    means = []
    for N in horizons:
        times = []
        for _ in range(reps):
            prob = make_qp(N)
            sol = solve(prob, **solve_kw)
            times.append(sol.solve_time)
        times.sort()
        # trimmed mean, drops the slowest rep (scheduler noise)
        keep = times[:-1] if len(times) > 2 else times
        means.append(sum(keep) / len(keep))
    n = np.asarray(horizons, dtype=float)
    t = np.asarray(means)
    coef = np.polyfit(n, t, 1)
    fit = np.polyval(coef, n)
    ss_res = float(np.sum((t - fit) ** 2))
    ss_tot = float(np.sum((t - np.mean(t)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return {"horizons": tuple(horizons), "mean_times": tuple(means),
            "slope": float(coef[0]), "intercept": float(coef[1]), "r2": r2}


__all__ = [
    "QPStage", "MultistageQP", "QPSolution", "QPError", "solve",
    "lower_soft_constraints", "to_dense", "dump", "load", "benchmark_scaling",
    "REGULARIZATION",
]
