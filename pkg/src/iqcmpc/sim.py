"""Closed-loop simulation, worst-case oracles and trace files."""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import cvxpy as cp
import numpy as np

from .iqc import (ConstraintSet, DelayUncertainty, DisturbanceModel, IQCFilter, LinearSystem,
                  delay_operator, filter_step)
from .linalg import solve_dare, sqrtm_psd
from .mpc import INFEASIBLE, TubeMPC
from .synthesis import TubeParams

__all__ = [
    "EnumerationBudgetError",
    "DivergenceError",
    "DisturbancePolicy",
    "StepRecord",
    "SimTrace",
    "plant_step",
    "closed_loop_run",
    "nominal_mpc_baseline",
    "brute_force_worst_error",
    "trace_columns",
    "export_trace",
    "read_trace",
    "replay_trace",
]


class EnumerationBudgetError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


class DisturbancePolicy:
    """Disturbance sequence generator for ``{d : d^T Xi d <= d_max^2}``.

    kind : {"zero", "uniform", "vertex"}
        ``uniform`` samples the ellipsoid uniformly; ``vertex`` samples its
        boundary (for a scalar disturbance: a random sign times ``d_max``).
    """

    KINDS = ("zero", "uniform", "vertex")

    def __init__(self, kind: str, dist: DisturbanceModel, seed: Optional[int] = None):
        if kind not in self.KINDS:
            raise ValueError(f"unknown disturbance policy {kind!r}")
        if kind != "zero" and seed is None:
            raise ValueError("random disturbance policies need an explicit seed")
        self.kind = kind
        self.dist = dist
        self.seed = seed
        self._root = np.linalg.inv(sqrtm_psd(dist.xi)) if dist.xi.size else np.zeros((0, 0))
        self.reset()

    def reset(self):
        self._rng = np.random.default_rng(self.seed)

    def draw(self) -> np.ndarray:
        nd = self.dist.xi.shape[0]
        if self.kind == "zero" or self.dist.d_max == 0.0:
            return np.zeros(nd)
        g = self._rng.standard_normal(nd)
        g /= np.linalg.norm(g)
        rad = 1.0 if self.kind == "vertex" else self._rng.uniform() ** (1.0 / nd)
        return self.dist.d_max * rad * (self._root @ g)


def plant_step(sys: LinearSystem, x, u, d, tau: int, y_hist: list, tau_max: int):
    """Advance the delayed plant; ``y_hist`` holds past outputs, oldest first.

    Returns ``(x_next, y, w)``. With ``D_w != 0`` the output equation is solved
    jointly with ``w = y_{t - tau} - y_t``.
    """
    base = sys.c @ x + sys.d_d @ d + sys.d_u @ u
    if tau == 0:
        y = base.copy()
        w = np.zeros(sys.n_w)
    else:
        idx = len(y_hist) - tau
        past = np.asarray(y_hist[idx], dtype=float) if idx >= 0 else np.zeros(sys.n_y)
        if np.any(sys.d_w):
            # y = base + D_w (past - y)
            y = np.linalg.solve(np.eye(sys.n_y) + sys.d_w, base + sys.d_w @ past)
        else:
            y = base
        w = delay_operator(list(y_hist) + [y], tau, tau_max)
    x_next = sys.a @ x + sys.b_w @ w + sys.b_d @ d + sys.b_u @ u
    return x_next, y, w


@dataclass
class StepRecord:
    t: int
    x: np.ndarray
    u: np.ndarray
    d: np.ndarray
    tau: int
    w: np.ndarray
    y: np.ndarray
    z0: np.ndarray
    v0: np.ndarray
    s0: float
    status: str
    cost: float
    candidate_feasible: Optional[bool] = None
    fallback: bool = False
    z_bar: Optional[np.ndarray] = field(default=None, repr=False)
    v_bar: Optional[np.ndarray] = field(default=None, repr=False)
    s_seq: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class SimTrace:
    """Closed-loop record; ``x_final`` is the state after the last step."""

    n_x: int
    n_u: int
    n_d: int
    n_w: int
    records: List[StepRecord] = field(default_factory=list)
    x_final: Optional[np.ndarray] = None
    aborted: Optional[str] = None
    whatif: list = field(default_factory=list, repr=False)

    def __len__(self):
        return len(self.records)

    @property
    def states(self) -> np.ndarray:
        xs = [r.x for r in self.records]
        if self.x_final is not None:
            xs.append(self.x_final)
        return np.array(xs).reshape(len(xs), self.n_x)

    @property
    def inputs(self) -> np.ndarray:
        return np.array([r.u for r in self.records]).reshape(len(self.records), self.n_u)

    def containment_points(self):
        """``(t, k, e, s)`` for the closed loop (k = 0) and every what-if prediction."""
        pts = [(r.t, 0, r.x - r.z0, r.s0) for r in self.records if r.status != INFEASIBLE]
        pts.extend(p for p in self.whatif if p[1] > 0)
        return pts

    def max_constraint_violation(self, cons: ConstraintSet) -> float:
        if not self.records:
            return -np.inf
        return max(float(np.max(cons.violation(r.x, r.u))) for r in self.records)


def _whatif(sys, tube, trace: SimTrace, tau_max: int):
    """Roll the true plant forward from each ``x_t`` under the committed inputs.

    Uses the realised disturbances and delays, so ``e_{k|t} = x_{k|t} - z_{k|t}``
    can be checked against ``s_{k|t}`` for every ``k`` with realised data.
    """
    recs = trace.records
    ys = [r.y for r in recs]
    pts = []
    for r in recs:
        if r.z_bar is None:
            continue
        horizon = r.v_bar.shape[0]
        x = r.x.copy()
        hist = list(ys[:r.t])
        for k in range(0, min(horizon, len(recs) - r.t) + 1):
            e = x - r.z_bar[k]
            pts.append((r.t, k, e, float(r.s_seq[k])))
            if k == horizon or r.t + k >= len(recs):
                break
            nxt = recs[r.t + k]
            u = r.v_bar[k] + tube.k @ e
            x, y, _ = plant_step(sys, x, u, nxt.d, nxt.tau, hist, tau_max)
            hist.append(y)
    return pts


def closed_loop_run(sys: LinearSystem, uncertainty: DelayUncertainty, controller: TubeMPC, x0,
                    n_steps: int, policy: DisturbancePolicy, filt: Optional[IQCFilter] = None,
                    whatif: bool = True, strict: bool = True) -> SimTrace:
    """Simulate the delayed plant under ``controller`` for ``n_steps`` samples.

    An infeasible first sample aborts the run (``trace.aborted`` is set). With
    ``strict`` any later infeasibility raises, as it would contradict recursive
    feasibility.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be nonnegative")
    controller.reset()
    uncertainty.reset()
    policy.reset()
    trace = SimTrace(sys.n_x, sys.n_u, sys.n_d, sys.n_w)
    x = np.asarray(x0, dtype=float).reshape(-1)
    psi = filt.initial_state() if filt is not None else None
    y_hist: list = []
    for t in range(n_steps):
        u, info = controller.step(x, psi)
        if u is None:
            if t == 0:
                trace.aborted = "infeasible at t=0"
                break
            if strict:
                raise RuntimeError(f"controller infeasible at t={t}")
            trace.aborted = f"infeasible at t={t}"
            break
        d = policy.draw()
        tau = uncertainty.draw(t)
        x_next, y, w = plant_step(sys, x, u, d, tau, y_hist, uncertainty.tau_max)
        sol = info.solution
        trace.records.append(StepRecord(
            t=t, x=x.copy(), u=np.asarray(u, dtype=float).reshape(-1), d=d, tau=tau, w=w, y=y,
            z0=sol.z_bar[0].copy(), v0=sol.v_bar[0].copy(), s0=float(sol.s_seq[0]),
            status=sol.status, cost=float(sol.cost), candidate_feasible=info.candidate_feasible,
            fallback=info.fallback, z_bar=sol.z_bar.copy(), v_bar=sol.v_bar.copy(),
            s_seq=sol.s_seq.copy()))
        if filt is not None:
            psi, _ = filter_step(filt, psi, y, w)
        y_hist.append(y)
        x = x_next
    if trace.records and trace.aborted is None:
        trace.x_final = x
    if whatif and trace.records:
        trace.whatif = _whatif(sys, controller.cfg.tube, trace, uncertainty.tau_max)
    return trace


def nominal_mpc_baseline(sys: LinearSystem, cons: ConstraintSet, q, r, horizon: int, x0,
                         uncertainty: DelayUncertainty, n_steps: int,
                         policy: Optional[DisturbancePolicy] = None,
                         diverge_at: float = 1e3) -> SimTrace:
    """Certainty-equivalent MPC that ignores the delay.

    Quadratic cost with the Riccati solution as terminal weight and the
    original (untightened) constraints. When the problem is infeasible the
    unconstrained LQR input is applied and the step is marked infeasible.
    The run stops once ``||x|| > diverge_at`` (``trace.aborted = 'diverged'``).
    """
    q = np.atleast_2d(q)
    r = np.atleast_2d(r)
    x_term, gain = solve_dare(sys.a, sys.b_u, q, r)
    nx, nu = sys.n_x, sys.n_u
    xp = cp.Parameter(nx)
    z = cp.Variable((horizon + 1, nx))
    v = cp.Variable((horizon, nu))
    f_x, f_u = cons.split(nx)
    con = [z[0] == xp]
    cost = 0
    for k in range(horizon):
        con += [z[k + 1] == sys.a @ z[k] + sys.b_u @ v[k], f_x @ z[k] + f_u @ v[k] <= cons.h_vec]
        cost += cp.quad_form(z[k], q) + cp.quad_form(v[k], r)
    cost += cp.quad_form(z[horizon], x_term)
    prob = cp.Problem(cp.Minimize(cost), con)

    uncertainty.reset()
    if policy is not None:
        policy.reset()
    trace = SimTrace(nx, nu, sys.n_d, sys.n_w)
    x = np.asarray(x0, dtype=float).reshape(-1)
    y_hist: list = []
    for t in range(n_steps):
        xp.value = x
        try:
            prob.solve(solver=cp.CLARABEL)
            ok = prob.status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE)
        except cp.error.SolverError:
            ok = False
        if ok:
            u = v.value[0].copy()
            status, cval = "Optimal", float(prob.value)
        else:
            u = gain @ x
            status, cval = INFEASIBLE, float("nan")
        d = policy.draw() if policy is not None else np.zeros(sys.n_d)
        tau = uncertainty.draw(t)
        x_next, y, w = plant_step(sys, x, u, d, tau, y_hist, uncertainty.tau_max)
        trace.records.append(StepRecord(t=t, x=x.copy(), u=u, d=d, tau=tau, w=w, y=y,
                                        z0=x.copy(), v0=u.copy(), s0=0.0, status=status, cost=cval))
        y_hist.append(y)
        x = x_next
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > diverge_at:
            trace.aborted = "diverged"
            break
    trace.x_final = x
    return trace


def brute_force_worst_error(sys: LinearSystem, k, tube: TubeParams, horizon: int,
                            delays: Sequence[int], d_vertices: Sequence, y_bar,
                            budget: int = 5_000_000) -> np.ndarray:
    """Exact worst ``||e_k||^2_{P_e}`` over all delay and disturbance sequences.

    The error starts at zero with the filter at rest; ``y_bar`` (shape
    ``(horizon, n_y)``) is the nominal output, so the true output is
    ``y_bar + (C + D_u K) e + D_d d``. Returns ``horizon + 1`` maxima.
    """
    delays = [int(t) for t in delays]
    verts = [np.atleast_1d(np.asarray(v, dtype=float)) for v in d_vertices]
    count = len(delays) ** horizon * len(verts) ** horizon
    if count > budget:
        raise EnumerationBudgetError(f"{count} sequences exceed the budget of {budget}")
    if np.any(sys.d_w):
        raise ValueError("enumeration assumes D_w = 0")
    k = np.atleast_2d(k)
    a_k = sys.a + sys.b_u @ k
    c_k = sys.c + sys.d_u @ k
    y_bar = np.asarray(y_bar, dtype=float).reshape(horizon, sys.n_y)
    tau_seq = np.array(list(itertools.product(delays, repeat=horizon)), dtype=int)
    d_idx = np.array(list(itertools.product(range(len(verts)), repeat=horizon)), dtype=int)
    vert_arr = np.stack(verts)
    nt, nd_seq = tau_seq.shape[0], d_idx.shape[0]
    taus = np.repeat(tau_seq, nd_seq, axis=0)              # (N, h)
    ds = vert_arr[np.tile(d_idx, (nt, 1))]                 # (N, h, n_d)
    n = taus.shape[0]
    e = np.zeros((n, sys.n_x))
    ys = np.zeros((n, horizon, sys.n_y))
    out = np.zeros(horizon + 1)
    rows = np.arange(n)
    for step in range(horizon):
        d = ds[:, step]
        y = y_bar[step] + e @ c_k.T + d @ sys.d_d.T
        ys[:, step] = y
        tau = taus[:, step]
        src = step - tau
        past = np.where((src >= 0)[:, None], ys[rows, np.maximum(src, 0)], 0.0)
        w = past - y
        e = e @ a_k.T + w @ sys.b_w.T + d @ sys.b_d.T
        out[step + 1] = float(np.max(np.einsum("ni,ij,nj->n", e, tube.p_e, e)))
    return out


# -- trace files ---------------------------------------------------------------

def _names(base: str, n: int) -> List[str]:
    return [base] if n == 1 else [f"{base}{i + 1}" for i in range(n)]


def trace_columns(n_x: int, n_u: int = 1, n_d: int = 1, n_w: int = 1) -> List[str]:
    """CSV header: ``t, x1.., u, d, tau, w, s0, z01.., v0, status, cost``."""
    return (["t"] + [f"x{i + 1}" for i in range(n_x)] + _names("u", n_u) + _names("d", n_d)
            + ["tau"] + _names("w", n_w) + ["s0"] + [f"z0{i + 1}" for i in range(n_x)]
            + _names("v0", n_u) + ["status", "cost"])


def _fmt(v) -> str:
    return "%.17g" % float(v)


def export_trace(trace: SimTrace, path) -> None:
    """Write ``trace`` as CSV with 17 significant digits (bit-exact round trip)."""
    cols = trace_columns(trace.n_x, trace.n_u, trace.n_d, trace.n_w)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for r in trace.records:
            row = [str(r.t)] + [_fmt(v) for v in r.x] + [_fmt(v) for v in r.u] + [_fmt(v) for v in r.d]
            row += [str(r.tau)] + [_fmt(v) for v in r.w] + [_fmt(r.s0)]
            row += [_fmt(v) for v in r.z0] + [_fmt(v) for v in r.v0] + [r.status, _fmt(r.cost)]
            wr.writerow(row)


def read_trace(path) -> dict:
    """Read a trace CSV into ``{column: list}``; numeric columns as floats, ``t``/``tau`` as ints."""
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        cols = {h: [] for h in header}
        for row in rd:
            for h, val in zip(header, row):
                if h == "status":
                    cols[h].append(val)
                elif h in ("t", "tau"):
                    cols[h].append(int(val))
                else:
                    cols[h].append(float(val))
    return cols


def replay_trace(table: dict, sys: LinearSystem, tau_max: int) -> float:
    """Largest mismatch when re-simulating a trace table from its logged ``u, d, tau``.

    Checks that each logged ``w`` follows from the delay operator and that each
    logged state follows from the previous one.
    """
    n = len(table["t"])
    get = lambda base, m, i: np.array([table[c][i] for c in _names(base, m)])
    xs = [np.array([table[f"x{j + 1}"][i] for j in range(sys.n_x)]) for i in range(n)]
    worst = 0.0
    hist: list = []
    for i in range(n):
        u = get("u", sys.n_u, i)
        d = get("d", sys.n_d, i)
        w_log = get("w", sys.n_w, i)
        x_next, y, w = plant_step(sys, xs[i], u, d, table["tau"][i], hist, tau_max)
        worst = max(worst, float(np.max(np.abs(w - w_log), initial=0.0)))
        if i + 1 < n:
            worst = max(worst, float(np.max(np.abs(x_next - xs[i + 1]))))
        hist.append(y)
    return worst
