"""Online tube MPC.

At every sample the controller picks a nominal initial state ``z0`` and
nominal inputs ``v_0..v_{T-1}`` minimising a quadratic nominal cost subject
to tightened constraints along a scalar tube, and applies
``u = v_0 + K (x - z0)``.

Two observations make the online problem convex. First, the re-centring
formula for the tube size at ``k = 0`` can be written as

    s_0 = ||x - z0||^2_{P_e} + (||z1 - z0||_{P_diff} + b)^2,

where ``z1`` is the previously predicted nominal state and
``b = sqrt(s_1 - ||x - z1||^2_{P_e})`` is data. Second, with
``sigma_k = sqrt(s_k)`` the prediction step reads
``sigma_{k+1} >= ||(rho sigma_k, sqrt(gamma) d_max, Gamma^{1/2} y_k)||``. The
whole problem is therefore a second-order cone program, solved with
Clarabel through cvxpy (``method="socp"``). The squared, smooth form of
the same constraints is available through SciPy's SLSQP
(``method="sqp"``).

Every returned solution is re-simulated: nominal states from the
dynamics, tube sizes from the exact recursions, and all constraints are
re-checked in square-root form. If that fails, or if the cost does not
beat the shifted previous solution, the shifted solution is used instead.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import cvxpy as cp
import numpy as np
from scipy.optimize import minimize

from .iqc import ConstraintSet, LinearSystem
from .linalg import sqrtm_psd, symmetrize
from .synthesis import TerminalSet, TubeParams
from .tube import exact_update, initial_tube_size, tube_measurement_update

__all__ = [
    "OPTIMAL",
    "FEASIBLE_SUBOPTIMAL",
    "INFEASIBLE",
    "RecursiveFeasibilityError",
    "MPCConfig",
    "MPCSolution",
    "StepInfo",
    "candidate_shift",
    "evaluate_solution",
    "build_ocp",
    "solve_ocp",
    "control_law",
    "TubeMPC",
]

OPTIMAL = "Optimal"
FEASIBLE_SUBOPTIMAL = "FeasibleSuboptimal"
INFEASIBLE = "Infeasible"


class RecursiveFeasibilityError(RuntimeError):
    """The shifted previous solution is not feasible although it must be."""


@dataclass(frozen=True)
class MPCConfig:
    sys: LinearSystem
    cons: ConstraintSet
    tube: TubeParams
    terminal: TerminalSet
    q: np.ndarray
    r: np.ndarray
    horizon: int

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        for name in ("q", "r"):
            m = symmetrize(np.atleast_2d(getattr(self, name)))
            if np.min(np.linalg.eigvalsh(m)) <= 0:
                raise ValueError(f"{name} must be positive definite")
            object.__setattr__(self, name, m)

    @property
    def s_cost(self) -> np.ndarray:
        return self.terminal.s_mat


@dataclass
class MPCSolution:
    """Nominal prediction at one sample; ``s_seq`` are tube sizes (not roots)."""

    z_bar: np.ndarray      # (T+1, n_x)
    v_bar: np.ndarray      # (T, n_u)
    y_bar: np.ndarray      # (T, n_y)
    s_seq: np.ndarray      # (T+1,)
    cost: float
    status: str

    @property
    def z0(self) -> np.ndarray:
        return self.z_bar[0]


@dataclass
class _InitData:
    """Data fixing the tube size at ``k = 0`` for a given nominal start ``z0``."""

    x: np.ndarray
    z1: np.ndarray           # previous prediction of the current nominal state (x at t = 0)
    s1: Optional[float]      # previous prediction of the current tube size (None at t = 0)
    psi: Optional[np.ndarray] = None
    exact: bool = False
    fixed: bool = False

    def s0(self, z0, tube: TubeParams) -> float:
        e0 = self.x - z0
        if self.exact:
            if self.s1 is None:
                return _qf(tube.p, np.concatenate([e0, np.ravel(self.psi)]))
            return exact_update(self.s1, self.x - self.z1, self.psi, e0, tube)
        if self.s1 is None:
            return initial_tube_size(e0, tube)
        return tube_measurement_update(self.s1, self.x - self.z1, e0, tube)


@dataclass
class StepInfo:
    t: int
    status: str
    u: Optional[np.ndarray]
    solution: Optional[MPCSolution]
    candidate: Optional[MPCSolution] = None
    candidate_feasible: Optional[bool] = None
    candidate_violation: Optional[float] = None
    fallback: bool = False
    solver_status: str = ""
    solve_time: float = 0.0
    messages: list = field(default_factory=list)


def _qf(m, v) -> float:
    v = np.ravel(v)
    return float(v @ m @ v)


def _cost(cfg: MPCConfig, z, v) -> float:
    c = sum(_qf(cfg.q, z[k]) + _qf(cfg.r, v[k]) for k in range(cfg.horizon))
    return c + _qf(cfg.s_cost, z[-1])


def _rollout(cfg: MPCConfig, z0, v):
    sys = cfg.sys
    z = np.zeros((cfg.horizon + 1, sys.n_x))
    z[0] = z0
    for k in range(cfg.horizon):
        z[k + 1] = sys.a @ z[k] + sys.b_u @ v[k]
    y = z[:-1] @ sys.c.T + v @ sys.d_u.T
    return z, y


def _tube_rollout(cfg: MPCConfig, s0, y):
    tube = cfg.tube
    s = np.zeros(cfg.horizon + 1)
    s[0] = s0
    base = tube.gamma * tube.d_max ** 2
    for k in range(cfg.horizon):
        s[k + 1] = tube.rho ** 2 * s[k] + base + _qf(tube.gamma_mat, y[k])
    return s


def evaluate_solution(cfg: MPCConfig, sol: MPCSolution) -> float:
    """Largest violation of the tightened, terminal and tube constraints (<= 0 means feasible).

    Constraints are checked in the square-root form ``F [z; v] + c sqrt(s) <= f``.
    """
    cons, tube, term = cfg.cons, cfg.tube, cfg.terminal
    worst = -np.inf
    for k in range(cfg.horizon):
        w = np.concatenate([sol.z_bar[k], sol.v_bar[k]])
        row = cons.h_mat @ w + tube.c * np.sqrt(max(sol.s_seq[k], 0.0)) - cons.h_vec
        worst = max(worst, float(np.max(row)))
    worst = max(worst, _qf(term.s_mat, sol.z_bar[-1]) - term.x_omega)
    worst = max(worst, float(sol.s_seq[-1]) - term.s_omega)
    worst = max(worst, -float(np.min(sol.s_seq)))
    return worst


def candidate_shift(prev: MPCSolution, cfg: MPCConfig) -> MPCSolution:
    """Shift ``prev`` by one sample and append the terminal controller step."""
    sys, tube, term = cfg.sys, cfg.tube, cfg.terminal
    zt = prev.z_bar[-1]
    v_app = term.k_omega @ zt
    z_app = (sys.a + sys.b_u @ term.k_omega) @ zt
    y_app = (sys.c + sys.d_u @ term.k_omega) @ zt
    s_app = tube.rho ** 2 * prev.s_seq[-1] + _qf(tube.gamma_mat, y_app) + tube.gamma * tube.d_max ** 2
    z = np.vstack([prev.z_bar[1:], z_app])
    v = np.vstack([prev.v_bar[1:], v_app])
    y = np.vstack([prev.y_bar[1:], y_app])
    s = np.append(prev.s_seq[1:], s_app)
    return MPCSolution(z_bar=z, v_bar=v, y_bar=y, s_seq=s, cost=_cost(cfg, z, v),
                       status=FEASIBLE_SUBOPTIMAL)


def _assemble(cfg: MPCConfig, z0, v, init: _InitData, status: str) -> MPCSolution:
    v = np.asarray(v, dtype=float).reshape(cfg.horizon, cfg.sys.n_u)
    z, y = _rollout(cfg, np.asarray(z0, dtype=float), v)
    s = _tube_rollout(cfg, init.s0(z[0], cfg.tube), y)
    return MPCSolution(z_bar=z, v_bar=v, y_bar=y, s_seq=s, cost=_cost(cfg, z, v), status=status)


class _SOCP:
    """The cone program, built once with cvxpy parameters for the sample data."""

    def __init__(self, cfg: MPCConfig, exact: bool, fixed: bool, backoff: float, n_psi: int):
        sys, tube, term, cons = cfg.sys, cfg.tube, cfg.terminal, cfg.cons
        T, nx, nu = cfg.horizon, sys.n_x, sys.n_u
        self.exact = exact
        self.x = cp.Parameter(nx)
        self.z1 = cp.Parameter(nx)
        self.b = cp.Parameter(nonneg=True)
        self.psi = cp.Parameter(n_psi) if (exact and n_psi) else None
        self.z = cp.Variable((T + 1, nx))
        self.v = cp.Variable((T, nu))
        self.sig = cp.Variable(T + 1)
        z, v, sig = self.z, self.v, self.sig
        f_x, f_u = cons.split(nx)
        g_half = sqrtm_psd(tube.gamma_mat)
        q_half = sqrtm_psd(cfg.q)
        r_half = sqrtm_psd(cfg.r)
        s_half = sqrtm_psd(term.s_mat)
        base = np.sqrt(tube.gamma) * tube.d_max
        con = []
        if exact:
            p_half = sqrtm_psd(tube.p)
            parts = [self.x - z[0]]
            if self.psi is not None:
                parts.append(self.psi)
            vec = p_half @ cp.hstack(parts)
            con.append(sig[0] >= cp.norm(cp.hstack([vec, self.b])))
        else:
            pe_half = sqrtm_psd(tube.p_e)
            pd_half = sqrtm_psd(tube.p_diff)
            root = cp.Variable()
            con.append(root >= cp.norm(pd_half @ (self.z1 - z[0])) + self.b)
            con.append(sig[0] >= cp.norm(cp.hstack([pe_half @ (self.x - z[0]), root])))
        if fixed:
            con.append(z[0] == self.z1)
        cost = 0
        for k in range(T):
            con.append(z[k + 1] == sys.a @ z[k] + sys.b_u @ v[k])
            yk = sys.c @ z[k] + sys.d_u @ v[k]
            con.append(sig[k + 1] >= cp.norm(cp.hstack([tube.rho * sig[k], base, g_half @ yk])))
            # no back-off on the first row: a measured state on the boundary is admissible
            con.append(f_x @ z[k] + f_u @ v[k] + tube.c * sig[k] <= cons.h_vec - (backoff if k else 0.0))
            cost += cp.sum_squares(q_half @ z[k]) + cp.sum_squares(r_half @ v[k])
        cost += cp.sum_squares(s_half @ z[T])
        con.append(cp.sum_squares(s_half @ z[T]) <= term.x_omega * (1.0 - backoff))
        con.append(sig[T] <= np.sqrt(term.s_omega) * (1.0 - backoff))
        self.prob = cp.Problem(cp.Minimize(cost), con)

    def solve(self, init: _InitData, tube: TubeParams):
        self.x.value = init.x
        self.z1.value = init.z1
        if self.exact:
            if init.s1 is None:
                kappa = 0.0
            else:
                kappa = init.s1 - _qf(tube.p, np.concatenate([init.x - init.z1, np.ravel(init.psi)]))
                if kappa < -1e-9 * max(1.0, init.s1):
                    raise ValueError(f"exact tube left its bound by {-kappa:.3g}")
            self.b.value = np.sqrt(max(kappa, 0.0))
            if self.psi is not None:
                self.psi.value = np.ravel(init.psi)
        else:
            if init.s1 is None:
                self.b.value = 0.0
            else:
                arg = init.s1 - _qf(tube.p_e, init.x - init.z1)
                self.b.value = np.sqrt(max(arg, 0.0))
        try:
            # inaccurate solutions are re-simulated and checked by the caller
            with warnings.catch_warnings():
                warnings.filterwarnings("ignore", message="Solution may be inaccurate")
                self.prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10,
                                tol_feas=1e-10, tol_ktratio=1e-8, max_iter=200)
        except cp.error.SolverError as exc:
            return "solver_error", None, None, str(exc)
        st = self.prob.status
        if st in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            return st, self.z.value[0].copy(), self.v.value.copy(), ""
        return st, None, None, ""


class _SQP:
    """Smooth squared reformulation solved with SLSQP."""

    def __init__(self, cfg: MPCConfig, exact: bool, fixed: bool, n_psi: int = 0, max_iter: int = 200):
        self.cfg = cfg
        self.n_psi = n_psi
        self.exact = exact
        self.fixed = fixed
        self.max_iter = max_iter
        sys = cfg.sys
        T, nx, nu = cfg.horizon, sys.n_x, sys.n_u
        # z = phi z0 + gam v (stacked over k = 0..T)
        self.phi = np.zeros(((T + 1) * nx, nx))
        self.gam = np.zeros(((T + 1) * nx, T * nu))
        ak = np.eye(nx)
        for k in range(T + 1):
            self.phi[k * nx:(k + 1) * nx] = ak
            ak = sys.a @ ak
        for k in range(1, T + 1):
            for j in range(k):
                blk = np.linalg.matrix_power(sys.a, k - 1 - j) @ sys.b_u
                self.gam[k * nx:(k + 1) * nx, j * nu:(j + 1) * nu] = blk
        self.n = nx + T * nu + T + 1
        self._restore = None

    def restoration(self) -> "_SOCP":
        if self._restore is None:
            self._restore = _SOCP(self.cfg, self.exact, self.fixed, 0.0, self.n_psi)
        return self._restore

    def _split(self, zeta):
        sys = self.cfg.sys
        T, nx, nu = self.cfg.horizon, sys.n_x, sys.n_u
        z0 = zeta[:nx]
        v = zeta[nx:nx + T * nu]
        s = zeta[nx + T * nu:]
        return z0, v, s

    def solve(self, init: _InitData, starts):
        cfg, sys, tube, term, cons = self.cfg, self.cfg.sys, self.cfg.tube, self.cfg.terminal, self.cfg.cons
        T, nx, nu, ny = cfg.horizon, sys.n_x, sys.n_u, sys.n_y
        n = self.n
        iz, iv, is_ = slice(0, nx), slice(nx, nx + T * nu), slice(nx + T * nu, n)
        phi, gam = self.phi, self.gam
        qbig = np.kron(np.eye(T), cfg.q)
        rbig = np.kron(np.eye(T), cfg.r)
        f_x, f_u = cons.split(nx)
        lin_rows = tube.c < 1e-12
        base = tube.gamma * tube.d_max ** 2

        def states(zeta):
            z0, v, _ = self._split(zeta)
            return (phi @ z0 + gam @ v).reshape(T + 1, nx)

        def dstate(k):
            j = np.zeros((nx, n))
            j[:, iz] = phi[k * nx:(k + 1) * nx]
            j[:, iv] = gam[k * nx:(k + 1) * nx]
            return j

        dz = [dstate(k) for k in range(T + 1)]

        def dinput(k):
            j = np.zeros((nu, n))
            j[:, nx + k * nu: nx + (k + 1) * nu] = np.eye(nu)
            return j

        dv = [dinput(k) for k in range(T)]

        def obj(zeta):
            z = states(zeta)
            _, v, _ = self._split(zeta)
            return float(z[:T].ravel() @ qbig @ z[:T].ravel() + v @ rbig @ v + _qf(cfg.s_cost, z[T]))

        def obj_grad(zeta):
            z = states(zeta)
            _, v, _ = self._split(zeta)
            g = np.zeros(n)
            for k in range(T):
                g += 2.0 * (cfg.q @ z[k]) @ dz[k]
            g += 2.0 * (cfg.s_cost @ z[T]) @ dz[T]
            g[iv] += 2.0 * rbig @ v
            return g

        def ineq(zeta):
            z = states(zeta)
            z0, v, s = self._split(zeta)
            v = v.reshape(T, nu)
            out = []
            e0 = init.x - z0
            if self.exact:
                psi = np.ravel(init.psi) if init.psi is not None else np.zeros(0)
                kappa = 0.0 if init.s1 is None else init.s1 - _qf(tube.p, np.concatenate([init.x - init.z1, psi]))
                out.append(s[0] - _qf(tube.p, np.concatenate([e0, psi])) - kappa)
            else:
                b2 = 0.0 if init.s1 is None else max(init.s1 - _qf(tube.p_e, init.x - init.z1), 0.0)
                delta = init.z1 - z0
                qv = _qf(tube.p_e, e0) + _qf(tube.p_diff, delta) + b2
                out.append(s[0] - qv)
                out.append((s[0] - qv) ** 2 - 4.0 * b2 * _qf(tube.p_diff, delta))
            for k in range(T):
                yk = sys.c @ z[k] + sys.d_u @ v[k]
                out.append(s[k + 1] - tube.rho ** 2 * s[k] - base - _qf(tube.gamma_mat, yk))
                gap = cons.h_vec - f_x @ z[k] - f_u @ v[k]
                out.extend(gap)
                sq = gap ** 2 - tube.c ** 2 * s[k]
                out.extend(sq[~lin_rows])
            out.append(term.x_omega - _qf(term.s_mat, z[T]))
            out.append(term.s_omega - s[T])
            out.extend(s)
            return np.array(out)

        def ineq_jac(zeta):
            z = states(zeta)
            z0, v, s = self._split(zeta)
            v = v.reshape(T, nu)
            rows = []
            e0 = init.x - z0
            if self.exact:
                psi = np.ravel(init.psi) if init.psi is not None else np.zeros(0)
                r = np.zeros(n)
                r[is_.start] = 1.0
                r[iz] = 2.0 * (tube.p[:nx, :] @ np.concatenate([e0, psi]))
                rows.append(r)
            else:
                b2 = 0.0 if init.s1 is None else max(init.s1 - _qf(tube.p_e, init.x - init.z1), 0.0)
                delta = init.z1 - z0
                qv = _qf(tube.p_e, e0) + _qf(tube.p_diff, delta) + b2
                dq = -2.0 * tube.p_e @ e0 - 2.0 * tube.p_diff @ delta
                r1 = np.zeros(n)
                r1[is_.start] = 1.0
                r1[iz] = -dq
                rows.append(r1)
                r2 = np.zeros(n)
                r2[is_.start] = 2.0 * (s[0] - qv)
                r2[iz] = -2.0 * (s[0] - qv) * dq + 8.0 * b2 * (tube.p_diff @ delta)
                rows.append(r2)
            for k in range(T):
                yk = sys.c @ z[k] + sys.d_u @ v[k]
                dy = sys.c @ dz[k] + sys.d_u @ dv[k]
                r = -2.0 * (tube.gamma_mat @ yk) @ dy
                r[is_.start + k + 1] += 1.0
                r[is_.start + k] -= tube.rho ** 2
                rows.append(r)
                gap = cons.h_vec - f_x @ z[k] - f_u @ v[k]
                dgap = -(f_x @ dz[k] + f_u @ dv[k])
                rows.extend(dgap)
                for i in np.flatnonzero(~lin_rows):
                    r = 2.0 * gap[i] * dgap[i]
                    r[is_.start + k] -= tube.c[i] ** 2
                    rows.append(r)
            rows.append(-2.0 * (term.s_mat @ z[T]) @ dz[T])
            r = np.zeros(n)
            r[is_.stop - 1] = -1.0
            rows.append(r)
            for k in range(T + 1):
                r = np.zeros(n)
                r[is_.start + k] = 1.0
                rows.append(r)
            return np.array(rows)

        cons_list = [{"type": "ineq", "fun": ineq, "jac": ineq_jac}]
        if self.fixed:
            cons_list.append({"type": "eq", "fun": lambda zeta: self._split(zeta)[0] - init.z1,
                              "jac": lambda zeta: np.hstack([np.eye(nx), np.zeros((nx, n - nx))])})
        best = None
        for z0, v in starts:
            y = (_rollout(cfg, z0, v.reshape(T, nu))[1])
            s = _tube_rollout(cfg, max(init.s0(z0, tube), 0.0), y)
            zeta0 = np.concatenate([z0, v.ravel(), s])
            res = minimize(obj, zeta0, jac=obj_grad, constraints=cons_list, method="SLSQP",
                           options={"maxiter": self.max_iter, "ftol": 1e-12})
            if best is None or (res.success and (not best.success or res.fun < best.fun)):
                best = res
        z0, v, _ = self._split(best.x)
        return ("optimal" if best.success else best.message), z0.copy(), v.copy(), best.message


def build_ocp(cfg: MPCConfig, method: str = "socp", init_mode: str = "free", tube_mode: str = "general",
              n_psi: int = 0, backoff: float = 1e-9):
    """Construct the reusable online problem for ``cfg``.

    ``init_mode='fixed'`` freezes the nominal start to the previous prediction
    (the measured state at the first sample); ``tube_mode='exact'`` uses the
    filter state to re-centre the tube.
    """
    if init_mode not in ("free", "fixed"):
        raise ValueError("init_mode must be 'free' or 'fixed'")
    if tube_mode not in ("general", "exact"):
        raise ValueError("tube_mode must be 'general' or 'exact'")
    exact = tube_mode == "exact"
    fixed = init_mode == "fixed"
    if method == "socp":
        return _SOCP(cfg, exact, fixed, backoff, n_psi)
    if method == "sqp":
        return _SQP(cfg, exact, fixed, n_psi)
    raise ValueError(f"unknown method {method!r}")


def solve_ocp(cfg: MPCConfig, ocp, init: _InitData, warm: Optional[MPCSolution] = None,
              tol: float = 1e-8):
    """Solve, re-simulate and verify; fall back to ``warm`` when it is better.

    Returns ``(solution, solver_status, fallback_used)``; ``solution`` is None
    only when no feasible point is known.
    """
    if isinstance(ocp, _SOCP):
        status, z0, v, _ = ocp.solve(init, cfg.tube)
    else:
        starts = []
        if warm is not None:
            starts.append((warm.z_bar[0], warm.v_bar.ravel()))
        else:
            nv = cfg.horizon * cfg.sys.n_u
            starts.append((init.x.copy(), np.zeros(nv)))
            starts.append((np.zeros(cfg.sys.n_x), np.zeros(nv)))
        status, z0, v, _ = ocp.solve(init, starts)
    sol = None
    if z0 is not None:
        if init.fixed:
            z0 = init.z1.copy()
        try:
            cand = _assemble(cfg, z0, v, init, OPTIMAL)
            viol = evaluate_solution(cfg, cand)
            # strict feasibility when a fallback exists, solver tolerance otherwise
            if viol <= 0.0 or (warm is None and viol <= tol):
                sol = cand
        except ValueError:
            sol = None
    if sol is None and warm is None and isinstance(ocp, _SQP):
        # feasibility restoration through the convex form, then one more polish
        rest = ocp.restoration()
        status, z0, v, _ = rest.solve(init, cfg.tube)
        if z0 is not None:
            _, z0p, vp, _ = ocp.solve(init, [(z0, v.ravel())])
            for zz, vv in ((z0p, vp), (z0, v)):
                if init.fixed:
                    zz = init.z1.copy()
                try:
                    cand = _assemble(cfg, zz, vv, init, OPTIMAL)
                except ValueError:
                    continue
                if evaluate_solution(cfg, cand) <= tol:
                    sol = cand
                    break
    if warm is not None:
        if sol is None or sol.cost > warm.cost + 1e-9:
            return replace(warm, status=FEASIBLE_SUBOPTIMAL), status, True
    return sol, status, False


def control_law(sol: MPCSolution, x, k) -> np.ndarray:
    """``u = v_0 + K (x - z0)``."""
    return sol.v_bar[0] + np.atleast_2d(k) @ (np.asarray(x, dtype=float) - sol.z_bar[0])


class TubeMPC:
    """Receding-horizon controller; call :meth:`step` once per sample.

    Parameters
    ----------
    cfg : MPCConfig
    method : {"socp", "sqp"}
    init_mode : {"free", "fixed"}
        Optimise the nominal start, or freeze it to the previous prediction.
    tube_mode : {"general", "exact"}
        Re-centre the tube without or with knowledge of the filter state.
    n_psi : int
        Filter dimension, needed for ``tube_mode='exact'``.
    """

    def __init__(self, cfg: MPCConfig, method: str = "socp", init_mode: str = "free",
                 tube_mode: str = "general", n_psi: int = 0, candidate_tol: float = 1e-9):
        self.cfg = cfg
        self.method = method
        self.init_mode = init_mode
        self.tube_mode = tube_mode
        self.n_psi = n_psi
        self.candidate_tol = candidate_tol
        self.ocp = build_ocp(cfg, method, init_mode, tube_mode, n_psi)
        self.reset()

    def reset(self):
        self.t = 0
        self.prev: Optional[MPCSolution] = None

    def step(self, x, psi=None):
        """Compute the input for the measured state ``x`` (and filter state ``psi``)."""
        cfg = self.cfg
        x = np.asarray(x, dtype=float).reshape(-1)
        exact = self.tube_mode == "exact"
        if exact and psi is None:
            psi = np.zeros(self.n_psi)
        t0 = time.perf_counter()
        if self.prev is None:
            init = _InitData(x=x, z1=x.copy(), s1=None, psi=psi, exact=exact,
                             fixed=self.init_mode == "fixed")
            cand = None
            cand_ok = None
            cand_viol = None
        else:
            init = _InitData(x=x, z1=self.prev.z_bar[1].copy(), s1=float(self.prev.s_seq[1]), psi=psi,
                             exact=exact, fixed=self.init_mode == "fixed")
            cand = candidate_shift(self.prev, cfg)
            # the candidate keeps z0 = z1, for which the re-centred tube equals s1
            cand.s_seq[0] = init.s0(cand.z_bar[0], cfg.tube)
            cand_viol = evaluate_solution(cfg, cand)
            scale = max(1.0, float(np.max(np.abs(cfg.cons.h_vec))), cfg.terminal.s_omega)
            cand_ok = cand_viol <= self.candidate_tol * scale
            if not cand_ok:
                raise RecursiveFeasibilityError(
                    f"shifted solution infeasible at t={self.t} (violation {cand_viol:.3g})")
        sol, solver_status, fallback = solve_ocp(cfg, self.ocp, init, warm=cand)
        elapsed = time.perf_counter() - t0
        info = StepInfo(t=self.t, status=INFEASIBLE if sol is None else sol.status, u=None,
                        solution=sol, candidate=cand, candidate_feasible=cand_ok,
                        candidate_violation=cand_viol, fallback=fallback,
                        solver_status=str(solver_status), solve_time=elapsed)
        if sol is None:
            return None, info
        u = control_law(sol, x, cfg.tube.k)
        info.u = u
        self.prev = sol
        self.t += 1
        return u, info
