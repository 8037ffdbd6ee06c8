"""Small dense semidefinite programs solved by a log-det barrier method.

A problem is declared with named scalar and symmetric-matrix variables,
affine matrix inequalities given as callables of the variable values, and
an optional affine objective. The callables are probed once to recover the
affine coefficients, so constraints can be written in ordinary matrix
notation::

    prob = SDPProblem()
    prob.add_sym("P", 2)
    prob.add_lmi(lambda v: a.T @ v["P"] @ a - v["P"], sense="<=", margin=1e-6)
    prob.add_lmi(lambda v: v["P"], sense=">=", margin=1e-6)
    res = solve_sdp(prob)

Feasibility is found with a phase-I problem that minimises a common shift
of all constraints; optimisation then follows the central path of the
barrier ``t * c^T x - sum(log det F_j(x))``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .linalg import NumericalError, sym_eig

__all__ = [
    "SDPError",
    "InfeasibleError",
    "MaxIterationsError",
    "NumericalFailureError",
    "SDPProblem",
    "SDPResult",
    "solve_sdp",
]


class SDPError(RuntimeError):
    pass


class InfeasibleError(SDPError):
    """No point satisfies all constraints with the requested margins."""


class MaxIterationsError(SDPError):
    pass


class NumericalFailureError(SDPError, NumericalError):
    pass


@dataclass
class _Var:
    name: str
    kind: str  # "scalar" or "sym"
    dim: int
    offset: int
    lb: Optional[float] = None
    ub: Optional[float] = None

    @property
    def size(self) -> int:
        return 1 if self.kind == "scalar" else self.dim * (self.dim + 1) // 2


@dataclass
class _LMI:
    name: str
    f0: np.ndarray          # (m, m), already shifted by the margin and sign-normalised
    fi: np.ndarray          # (N, m, m)
    margin: float
    sense: str
    active: np.ndarray      # indices of variables with nonzero coefficient


@dataclass
class SDPResult:
    """Solution of an :class:`SDPProblem`.

    Attributes
    ----------
    values : dict
        Variable name to float or symmetric ndarray.
    objective : float
        Objective at ``values`` (0 for feasibility problems).
    min_slack : float
        Smallest eigenvalue over all constraints after subtracting each
        constraint's required margin; nonnegative for a valid solution.
    slacks : dict
        Per-constraint smallest eigenvalue of the sign-normalised block.
    iterations : int
        Total Newton steps over both phases.
    gap : float
        Final duality-gap bound ``nu / t`` (0 for feasibility problems).
    """

    values: Dict[str, object]
    objective: float
    min_slack: float
    slacks: Dict[str, float]
    iterations: int
    gap: float
    x: np.ndarray = field(repr=False, default=None)


class SDPProblem:
    """Container for variables, affine LMIs and a linear objective."""

    def __init__(self, box: float = 1e6):
        self._vars: List[_Var] = []
        self._names: Dict[str, _Var] = {}
        self._lmi_specs: list = []
        self._objective: Optional[Callable] = None
        self.box = float(box)
        self._n = 0

    # -- declaration ---------------------------------------------------
    def _add(self, var: _Var):
        if var.name in self._names:
            raise ValueError(f"duplicate variable {var.name!r}")
        self._vars.append(var)
        self._names[var.name] = var
        self._n += var.size

    def add_scalar(self, name: str, lb: Optional[float] = None, ub: Optional[float] = None):
        if lb is not None and ub is not None and lb >= ub:
            raise ValueError(f"empty interval for {name!r}")
        self._add(_Var(name, "scalar", 1, self._n, lb, ub))

    def add_sym(self, name: str, dim: int):
        if dim < 1:
            raise ValueError("matrix variable dimension must be positive")
        self._add(_Var(name, "sym", int(dim), self._n))

    def add_lmi(self, fn: Callable, sense: str = ">=", margin: float = 0.0, name: Optional[str] = None):
        """Require ``fn(values) >= margin * I`` (or ``<= -margin * I``)."""
        if sense not in (">=", "<="):
            raise ValueError("sense must be '>=' or '<='")
        if margin < 0:
            raise ValueError("margin must be nonnegative")
        self._lmi_specs.append((name or f"lmi{len(self._lmi_specs)}", fn, sense, float(margin)))

    def set_objective(self, fn: Callable):
        """Minimise the affine scalar ``fn(values)``."""
        self._objective = fn

    @property
    def n_vars(self) -> int:
        return self._n

    @property
    def variables(self):
        return [v.name for v in self._vars]

    # -- vector <-> named values -----------------------------------------
    def unpack(self, x) -> Dict[str, object]:
        out = {}
        for v in self._vars:
            seg = x[v.offset:v.offset + v.size]
            if v.kind == "scalar":
                out[v.name] = float(seg[0])
            else:
                m = np.zeros((v.dim, v.dim))
                iu = np.triu_indices(v.dim)
                m[iu] = seg
                m = m + np.triu(m, 1).T
                out[v.name] = m
        return out

    def pack(self, values: Dict[str, object]) -> np.ndarray:
        x = np.zeros(self._n)
        for v in self._vars:
            if v.kind == "scalar":
                x[v.offset] = float(values[v.name])
            else:
                m = np.asarray(values[v.name], dtype=float)
                x[v.offset:v.offset + v.size] = m[np.triu_indices(v.dim)]
        return x

    # -- affine extraction -----------------------------------------------
    def _probe(self, fn, scalar: bool):
        n = self._n
        f0 = np.asarray(fn(self.unpack(np.zeros(n))), dtype=float)
        if scalar:
            f0 = f0.reshape(())
        elif f0.ndim != 2 or f0.shape[0] != f0.shape[1]:
            raise ValueError(f"constraint map must return a square matrix, got shape {f0.shape}")
        coef = np.zeros((n,) + f0.shape)
        e = np.zeros(n)
        for i in range(n):
            e[i] = 1.0
            coef[i] = np.asarray(fn(self.unpack(e)), dtype=float).reshape(f0.shape) - f0
            e[i] = 0.0
        # affinity check at a random point
        rng = np.random.default_rng(12345)
        xr = rng.standard_normal(n)
        direct = np.asarray(fn(self.unpack(xr)), dtype=float).reshape(f0.shape)
        model = f0 + np.tensordot(xr, coef, axes=1)
        scale = max(1.0, float(np.max(np.abs(direct))), float(np.max(np.abs(model))))
        if np.max(np.abs(direct - model), initial=0.0) > 1e-8 * scale:
            raise ValueError("constraint or objective map is not affine in the variables")
        return f0, coef

    def _compile(self):
        lmis = []
        for name, fn, sense, margin in self._lmi_specs:
            f0, fi = self._probe(fn, scalar=False)
            sym_err = max(np.max(np.abs(f0 - f0.T), initial=0.0),
                          np.max(np.abs(fi - np.swapaxes(fi, 1, 2)), initial=0.0))
            if sym_err > 1e-9 * max(1.0, np.max(np.abs(f0)), np.max(np.abs(fi), initial=0.0)):
                raise ValueError(f"constraint {name!r} is not symmetric")
            f0 = 0.5 * (f0 + f0.T)
            fi = 0.5 * (fi + np.swapaxes(fi, 1, 2))
            if sense == "<=":
                f0, fi = -f0, -fi
            f0 = f0 - margin * np.eye(f0.shape[0])
            active = np.flatnonzero(np.any(fi != 0.0, axis=(1, 2)))
            lmis.append(_LMI(name, f0, fi, margin, sense, active))
        # scalar bounds and the box become linear rows a @ x + b > 0
        rows_a, rows_b = [], []
        for v in self._vars:
            if v.kind != "scalar":
                continue
            if v.lb is not None:
                r = np.zeros(self._n); r[v.offset] = 1.0
                rows_a.append(r); rows_b.append(-v.lb)
            if v.ub is not None:
                r = np.zeros(self._n); r[v.offset] = -1.0
                rows_a.append(r); rows_b.append(v.ub)
        n_bounds = len(rows_a)
        eye = np.eye(self._n)
        lin_a = np.vstack(rows_a + [eye, -eye]) if self._n else np.zeros((0, 0))
        lin_b = np.concatenate([np.array(rows_b), np.full(2 * self._n, self.box)])
        if self._objective is not None:
            c0, c = self._probe(self._objective, scalar=True)
            c0 = float(c0)
        else:
            c0, c = 0.0, np.zeros(self._n)
        return lmis, lin_a, lin_b, n_bounds, c0, c


class _Barrier:
    """Barrier for ``F_j(x) + s * I > 0`` (shifted blocks) and linear rows."""

    def __init__(self, lmis, lin_a, lin_b, shift_rows):
        self.lmis = lmis
        self.lin_a = lin_a
        self.lin_b = lin_b
        self.shift_rows = shift_rows  # mask of linear rows that receive the shift
        self.nu = sum(l.f0.shape[0] for l in lmis) + lin_a.shape[0]

    def blocks(self, x, s):
        out = []
        for l in self.lmis:
            g = l.f0 + np.tensordot(x[l.active], l.fi[l.active], axes=1) if l.active.size else l.f0.copy()
            if s:
                g = g + s * np.eye(g.shape[0])
            out.append(g)
        r = self.lin_a @ x + self.lin_b + s * self.shift_rows
        return out, r

    def value(self, x, s):
        """Barrier value, or ``inf`` outside the domain."""
        blocks, r = self.blocks(x, s)
        if np.any(r <= 0):
            return np.inf, None
        val = -np.sum(np.log(r))
        chols = []
        for g in blocks:
            try:
                l = np.linalg.cholesky(g)
            except np.linalg.LinAlgError:
                return np.inf, None
            val -= 2.0 * np.sum(np.log(np.diag(l)))
            chols.append(l)
        return val, (chols, r)

    def derivatives(self, x, s, cache, with_shift: bool):
        """Gradient and Hessian in ``x`` (and ``s`` appended when ``with_shift``)."""
        chols, r = cache
        n = x.size
        dim = n + (1 if with_shift else 0)
        grad = np.zeros(dim)
        hess = np.zeros((dim, dim))
        for l, lc in zip(self.lmis, chols):
            m = lc.shape[0]
            linv = np.linalg.inv(lc)
            idx = l.active
            if with_shift:
                mats = np.concatenate([l.fi[idx], np.eye(m)[None]], axis=0)
                idx = np.concatenate([idx, [n]])
            else:
                mats = l.fi[idx]
            if idx.size == 0:
                continue
            w = np.einsum("ab,ibc,dc->iad", linv, mats, linv).reshape(idx.size, m * m)
            grad[idx] -= w.reshape(idx.size, m, m).trace(axis1=1, axis2=2)
            hess[np.ix_(idx, idx)] += w @ w.T
        inv_r = 1.0 / r
        a = self.lin_a
        if with_shift:
            a = np.hstack([a, self.shift_rows[:, None]])
        grad -= a.T @ inv_r
        hess += (a * inv_r[:, None] ** 2).T @ a
        return grad, hess


def _newton_center(bar: _Barrier, x, s, t, c, with_shift, max_steps, stop=None):
    """Minimise ``t * c^T [x; s] + barrier`` from a strictly feasible point."""
    steps = 0
    n = x.size
    val, cache = bar.value(x, s)
    if not np.isfinite(val):
        raise NumericalFailureError("Newton centering started outside the domain")
    while steps < max_steps:
        g, h = bar.derivatives(x, s, cache, with_shift)
        g = g + t * c
        h = 0.5 * (h + h.T)
        # symmetric diagonal scaling keeps the Newton system well conditioned
        d = 1.0 / np.sqrt(np.maximum(np.diag(h), 1e-300))
        hs = h * d[:, None] * d[None, :]
        try:
            lc = np.linalg.cholesky(hs + 1e-14 * np.eye(h.shape[0]))
            dx = -d * np.linalg.solve(lc.T, np.linalg.solve(lc, d * g))
        except np.linalg.LinAlgError as exc:
            raise NumericalFailureError("singular Newton system") from exc
        if not np.all(np.isfinite(dx)):
            raise NumericalFailureError("non-finite Newton step")
        dec2 = -float(g @ dx)
        steps += 1
        f0 = t * float(c @ np.append(x, s) if with_shift else c @ x) + val
        # centred, or the predicted decrease is lost in the round-off of f0
        if dec2 / 2.0 <= max(1e-9, 1e3 * np.finfo(float).eps * abs(f0)):
            break
        alpha = 1.0
        while True:
            xn = x + alpha * dx[:n]
            sn = s + alpha * dx[n] if with_shift else s
            vn, cn = bar.value(xn, sn)
            if np.isfinite(vn):
                fn = t * float(c @ np.append(xn, sn) if with_shift else c @ xn) + vn
                if fn <= f0 - 0.25 * alpha * dec2:
                    break
            alpha *= 0.5
            if alpha < 1e-16:
                if dec2 < 1e-6:
                    # round-off floor reached close to the centre
                    return x, s, steps
                raise NumericalFailureError("line search failed")
        x, s, val, cache = xn, sn, vn, cn
        if stop is not None and stop(x, s):
            break
    return x, s, steps


def solve_sdp(prob: SDPProblem, tol: float = 1e-7, max_iter: int = 500, mu: float = 20.0) -> SDPResult:
    """Solve ``prob``; see module docstring.

    Parameters
    ----------
    tol : float
        Relative bound on the final duality gap ``nu / t``.
    max_iter : int
        Cap on the total number of Newton steps over both phases.
    mu : float
        Central-path parameter growth factor.

    Raises
    ------
    InfeasibleError
        Phase I certifies that no strictly feasible point exists.
    MaxIterationsError
        The Newton budget was exhausted.
    NumericalFailureError
        Line search or linear algebra broke down.
    """
    lmis, lin_a, lin_b, n_bounds, c0, c = prob._compile()
    n = prob.n_vars
    shift_rows = np.zeros(lin_a.shape[0])
    shift_rows[:n_bounds] = 1.0
    bar = _Barrier(lmis, lin_a, lin_b, shift_rows)
    total = 0

    # phase I: minimise s subject to F_j(x) + s I > 0, s >= -1, inside the box
    x = np.zeros(n)
    blocks, r = bar.blocks(x, 0.0)
    worst = min([float(np.min(np.linalg.eigvalsh(g))) for g in blocks] + [float(np.min(r[:n_bounds], initial=np.inf))])
    if worst > 0:
        s = 0.0
    else:
        s = 1.0 - worst
        ph_a = np.vstack([lin_a, np.zeros((1, n))])
        ph_b = np.append(lin_b, 1.0)
        ph_bar = _Barrier(lmis, ph_a, ph_b, np.append(shift_rows, 1.0))
        cvec = np.zeros(n + 1)
        cvec[n] = 1.0
        t = 1.0
        while True:
            x, s, k = _newton_center(ph_bar, x, s, t, cvec, True, max_iter - total,
                                     stop=lambda _x, _s: _s < 0.0)
            total += k
            if s < 0.0:
                break
            gap = ph_bar.nu / t
            if s - gap > 0.0:
                raise InfeasibleError(f"constraints infeasible: common shift bounded below by {s - gap:.3g}")
            if gap < tol * max(1.0, abs(s)):
                raise InfeasibleError("constraints have no strictly feasible point at the requested margins")
            if total >= max_iter:
                raise MaxIterationsError("phase I did not find a feasible point")
            t *= mu

    # phase II
    gap = 0.0
    if np.any(c != 0.0):
        grad0, _ = bar.derivatives(x, 0.0, bar.value(x, 0.0)[1], False)
        t = max(1.0, float(np.linalg.norm(grad0) / max(np.linalg.norm(c), 1e-300)))
        while True:
            x, _, k = _newton_center(bar, x, 0.0, t, c, False, max_iter - total)
            total += k
            gap = bar.nu / t
            obj = c0 + float(c @ x)
            if gap < tol * max(1.0, abs(obj)):
                break
            if total >= max_iter:
                raise MaxIterationsError(f"barrier method stopped with gap {gap:.3g}")
            t *= mu

    values = prob.unpack(x)
    slacks = {}
    for l in lmis:
        g = l.f0 + np.tensordot(x, l.fi, axes=1)
        w, _ = sym_eig(g + l.margin * np.eye(g.shape[0]))
        slacks[l.name] = float(w[0])
    min_slack = min([slacks[l.name] - l.margin for l in lmis], default=np.inf)
    if min_slack < -1e-9 * max(1.0, max((abs(v) for v in slacks.values()), default=1.0)):
        raise NumericalFailureError(f"returned point violates a constraint by {-min_slack:.3g}")
    return SDPResult(values=values, objective=c0 + float(c @ x), min_slack=min_slack,
                     slacks=slacks, iterations=total, gap=gap, x=x)
