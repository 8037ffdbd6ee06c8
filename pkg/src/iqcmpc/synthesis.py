"""Offline design: stability and design LMIs, tube shape optimisation and
terminal ingredients.

The design LMI certifies, for the error system in feedback with the IQC
filter, the dissipation inequality behind the tube-size recursion
``s+ = rho^2 s + gamma d_max^2 + ||y_bar||^2_Gamma``. Among all certificates
:func:`minimize_tightening` selects the ``P`` whose error ellipsoid yields
the smallest total constraint back-off.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .iqc import (AugmentedPlant, ConstraintSet, DelayMultiplierFamily, DisturbanceModel,
                  IQCFilter, LinearSystem, assemble_augmented)
from .linalg import (inv_sqrtm, schur_reduce, solve_discrete_lyapunov, sym_eig, symmetrize)
from .sdp import InfeasibleError, SDPProblem, solve_sdp
from .tube import tighten_vector

__all__ = [
    "DesignInfeasibleError",
    "NoTerminalSetError",
    "TubeParams",
    "TerminalSet",
    "assemble_stability_lmi",
    "assemble_design_lmi",
    "design_lmi_max_eig",
    "minimize_tightening",
    "check_design_feasibility",
    "check_terminal_existence",
    "terminal_ingredients",
    "terminal_slacks",
    "sample_terminal_conditions",
]


class DesignInfeasibleError(RuntimeError):
    pass


class NoTerminalSetError(RuntimeError):
    pass


@dataclass(frozen=True)
class TubeParams:
    """Everything the online stage needs about the tube.

    ``p`` acts on ``[e; psi]``; ``p_e``/``p_diff`` are its Schur split on the
    first ``n_x`` coordinates, ``c`` the per-row tightening.
    """

    rho: float
    p: np.ndarray
    p_e: np.ndarray
    p_diff: np.ndarray
    gamma: float
    gamma_mat: np.ndarray
    k: np.ndarray
    c: np.ndarray
    d_max: float
    m: Optional[np.ndarray] = None
    x_mult: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if np.any(np.asarray(self.c) < 0):
            raise ValueError("tightening must be nonnegative")

    @property
    def n_x(self) -> int:
        return self.p_e.shape[0]

    @classmethod
    def from_p(cls, rho, p, k, gamma, gamma_mat, d_max, cons: ConstraintSet, n_x: int,
               m=None, x_mult=None, info=None) -> "TubeParams":
        p = symmetrize(p)
        p_e, p_diff = schur_reduce(p, n_x)
        k = np.atleast_2d(np.asarray(k, dtype=float))
        c = tighten_vector(p_e, k, cons)
        return cls(rho=float(rho), p=p, p_e=p_e, p_diff=p_diff, gamma=float(gamma),
                   gamma_mat=symmetrize(np.atleast_2d(gamma_mat)), k=k, c=c, d_max=float(d_max),
                   m=None if m is None else symmetrize(m),
                   x_mult=None if x_mult is None else np.atleast_2d(np.asarray(x_mult, dtype=float)),
                   info=dict(info or {}))


@dataclass(frozen=True)
class TerminalSet:
    """``Omega = {(x, s): ||x||^2_S <= x_omega, 0 <= s <= s_omega}`` with local gain ``k_omega``."""

    k_omega: np.ndarray
    s_mat: np.ndarray
    x_omega: float
    s_omega: float

    def __post_init__(self):
        if self.x_omega <= 0 or self.s_omega <= 0:
            raise ValueError("x_omega and s_omega must be positive")

    def contains(self, x, s, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return float(x @ self.s_mat @ x) <= self.x_omega + tol and -tol <= s <= self.s_omega + tol


# -- LMI assembly ---------------------------------------------------------

def assemble_stability_lmi(aug: AugmentedPlant, p, m, rho) -> np.ndarray:
    """Left-hand side of the IQC stability inequality, on ``[xi; w]``.

    Equals ``[I 0; A B; C D]^T diag(-rho^2 P, P, M) [I 0; A B; C D]``; it is
    affine in ``(P, M)`` jointly, so it can be used inside an SDP.
    """
    p = np.asarray(p)
    m = np.asarray(m)
    nxi = aug.n_xi
    nw = aug.b_tilde.shape[1]
    r1 = np.hstack([np.eye(nxi), np.zeros((nxi, nw))])
    r2 = np.hstack([aug.a_tilde, aug.b_tilde])
    r3 = np.hstack([aug.c_tilde, aug.d_tilde])
    out = -rho ** 2 * r1.T @ p @ r1 + r2.T @ p @ r2 + r3.T @ m @ r3
    return 0.5 * (out + out.T)


def assemble_design_lmi(aug: AugmentedPlant, p, m, rho, gamma, gamma_mat, xi) -> np.ndarray:
    """Left-hand side of the tube design inequality, on ``[xi; w; d; y_bar]``.

    Extends the stability block by the disturbance column and the nominal
    output column, with the supply ``-diag(gamma * Xi, Gamma)`` in the corner.
    """
    p = np.asarray(p)
    m = np.asarray(m)
    xi = np.atleast_2d(np.asarray(xi, dtype=float)) if np.size(xi) else np.zeros((0, 0))
    gamma_mat = np.atleast_2d(np.asarray(gamma_mat))
    nxi = aug.n_xi
    nw = aug.b_tilde.shape[1]
    nd = aug.b_d_tilde.shape[1]
    ny = aug.b_y_tilde.shape[1]
    ntot = nxi + nw + nd + ny
    r1 = np.zeros((nxi, ntot))
    r1[:, :nxi] = np.eye(nxi)
    r2 = np.hstack([aug.a_tilde, aug.b_tilde, aug.b_d_tilde, aug.b_y_tilde])
    r3 = np.hstack([aug.c_tilde, aug.d_tilde, aug.d_d_tilde, aug.d_y_tilde])
    r4 = np.zeros((nd + ny, ntot))
    r4[:, nxi + nw:] = np.eye(nd + ny)
    lam = np.zeros((nd + ny, nd + ny), dtype=np.result_type(p, gamma_mat, float))
    lam[:nd, :nd] = gamma * xi
    lam[nd:, nd:] = gamma_mat
    out = -rho ** 2 * r1.T @ p @ r1 + r2.T @ p @ r2 + r3.T @ m @ r3 - r4.T @ lam @ r4
    return 0.5 * (out + out.T)


def design_lmi_max_eig(aug, p, m, rho, gamma, gamma_mat, xi) -> float:
    w, _ = sym_eig(assemble_design_lmi(aug, p, m, rho, gamma, gamma_mat, xi))
    return float(w[-1])


# -- tube shape optimisation ------------------------------------------------

def _row_vectors(cons: ConstraintSet, k, n_x):
    f_x, f_u = cons.split(n_x)
    return f_x + f_u @ np.atleast_2d(k)


def minimize_tightening(sys: LinearSystem, filt: IQCFilter, cons: ConstraintSet, k, rho: float,
                        dist: DisturbanceModel, gamma: float, gamma_mat,
                        family: Optional[DelayMultiplierFamily] = None, m=None,
                        margin_rel: float = 1e-6, tol: float = 1e-7) -> TubeParams:
    """Tube shape ``P`` minimising ``sum_i c_i^2`` for fixed ``K, rho, gamma, Gamma``.

    The multiplier is either given (``m``) or a decision variable constrained
    by ``family`` (``M >= M_tau(X)`` for every delay, ``X >= 0``). Each row
    contributes a variable ``gamma_i`` with ``c_i^2 <= gamma_i`` encoded by a
    block matrix inequality in ``P``; the objective is ``sum_i gamma_i``.

    Raises
    ------
    DesignInfeasibleError
        No certificate exists for this ``(K, rho, gamma, Gamma)``.
    """
    if (m is None) == (family is None):
        raise ValueError("give exactly one of a fixed multiplier or a multiplier family")
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    k = np.atleast_2d(np.asarray(k, dtype=float))
    gamma_mat = symmetrize(np.atleast_2d(np.asarray(gamma_mat, dtype=float)))
    aug = assemble_augmented(sys, k, filt)
    n_x, n_psi = sys.n_x, filt.n_psi
    nxi = aug.n_xi
    scale = max(1.0, float(gamma), float(np.max(np.abs(gamma_mat))))
    margin = margin_rel * scale
    rows = _row_vectors(cons, k, n_x)

    prob = SDPProblem()
    prob.add_sym("P", nxi)
    if family is not None:
        prob.add_sym("M", filt.n_z)
        prob.add_sym("X", family.n_y)
        m_of = lambda v: v["M"]
    else:
        m_fixed = symmetrize(m)
        m_of = lambda v: m_fixed
    for i in range(cons.n_c):
        prob.add_scalar(f"g{i}")

    prob.add_lmi(lambda v: assemble_design_lmi(aug, v["P"], m_of(v), rho, gamma, gamma_mat, dist.xi),
                 sense="<=", margin=margin, name="design")
    prob.add_lmi(lambda v: v["P"], sense=">=", margin=margin, name="P")
    if family is not None:
        prob.add_lmi(lambda v: v["X"], sense=">=", name="X")
        for tau in range(family.tau_max + 1):
            prob.add_lmi(lambda v, tau=tau: v["M"] - family.m_tau(tau, v["X"]), sense=">=",
                         name=f"M_tau{tau}")

    def schur_block(v, i):
        pm = v["P"]
        p11 = pm[:n_x, :n_x]
        p21 = pm[n_x:, :n_x]
        p22 = pm[n_x:, n_x:]
        g = rows[i].reshape(-1, 1)
        top = np.hstack([p22, p21, np.zeros((n_psi, 1))])
        mid = np.hstack([p21.T, p11, g])
        bot = np.hstack([np.zeros((1, n_psi)), g.T, np.array([[v[f"g{i}"]]])])
        return np.vstack([top, mid, bot])

    for i in range(cons.n_c):
        prob.add_lmi(lambda v, i=i: schur_block(v, i), sense=">=", name=f"row{i}")
    prob.set_objective(lambda v: sum(v[f"g{i}"] for i in range(cons.n_c)))

    try:
        res = solve_sdp(prob, tol=tol)
    except InfeasibleError as exc:
        raise DesignInfeasibleError(
            f"no tube certificate for rho={rho}, gamma={gamma}: {exc}") from exc
    p = res.values["P"]
    m_opt = res.values["M"] if family is not None else symmetrize(m)
    x_opt = res.values.get("X")
    lmax = design_lmi_max_eig(aug, p, m_opt, rho, gamma, gamma_mat, dist.xi)
    info = {"design_lmi_max_eig": lmax, "margin": margin, "objective": res.objective,
            "gamma_i": [res.values[f"g{i}"] for i in range(cons.n_c)],
            "iterations": res.iterations}
    tube = TubeParams.from_p(rho, p, k, gamma, gamma_mat, dist.d_max, cons, n_x,
                             m=m_opt, x_mult=x_opt, info=info)
    return tube


def check_design_feasibility(sys: LinearSystem, filt: IQCFilter, k, rho: float,
                             dist: DisturbanceModel, family: DelayMultiplierFamily,
                             gamma: float = 1.0, margin_rel: float = 1e-6) -> bool:
    """Whether the design LMI admits a certificate with ``gamma = Gamma = gamma``.

    The inequality is jointly homogeneous in ``(P, M, gamma, Gamma)`` and the
    resulting tube is invariant under that scaling, so only the ratio between
    ``gamma`` and ``Gamma`` matters; equal scalars are the default choice.
    """
    k = np.atleast_2d(np.asarray(k, dtype=float))
    aug = assemble_augmented(sys, k, filt)
    gmat = gamma * np.eye(sys.n_y)
    margin = margin_rel * max(1.0, gamma)
    prob = SDPProblem()
    prob.add_sym("P", aug.n_xi)
    prob.add_sym("M", filt.n_z)
    prob.add_sym("X", family.n_y)
    prob.add_lmi(lambda v: assemble_design_lmi(aug, v["P"], v["M"], rho, gamma, gmat, dist.xi),
                 sense="<=", margin=margin, name="design")
    prob.add_lmi(lambda v: v["P"], sense=">=", margin=margin, name="P")
    prob.add_lmi(lambda v: v["X"], sense=">=", name="X")
    for tau in range(family.tau_max + 1):
        prob.add_lmi(lambda v, tau=tau: v["M"] - family.m_tau(tau, v["X"]), sense=">=",
                     name=f"M_tau{tau}")
    try:
        solve_sdp(prob)
    except InfeasibleError:
        return False
    return True


# -- terminal ingredients ------------------------------------------------------

def check_terminal_existence(cons: ConstraintSet, tube: TubeParams) -> bool:
    """True iff ``f_i > sqrt(gamma) d_max / sqrt(1 - rho^2) * c_i`` for every row."""
    bound = np.sqrt(tube.gamma) * tube.d_max / np.sqrt(1.0 - tube.rho ** 2)
    return bool(np.all(cons.h_vec > bound * tube.c))


def _terminal_geometry(sys, tube, cons, k_omega, s_mat):
    root = inv_sqrtm(s_mat)
    c_k = sys.c + sys.d_u @ k_omega
    l_mat = root @ c_k.T @ tube.gamma_mat @ c_k @ root
    lam = float(sym_eig(l_mat)[0][-1])
    f_x, f_u = cons.split(sys.n_x)
    h = np.linalg.norm((f_x + f_u @ k_omega) @ root, axis=1)
    return lam, h


def terminal_ingredients(sys: LinearSystem, tube: TubeParams, cons: ConstraintSet, q, r, k_omega,
                         s_omega: Optional[float] = None, n_bisect: int = 60) -> TerminalSet:
    """Terminal gain, cost, and set sizes ``(x_omega, s_omega)``.

    Without ``s_omega`` the largest ``x_omega`` is found by bisection with
    ``s_omega = (x_omega * lambda_max(L) + gamma d_max^2) / (1 - rho^2)``. With an
    ``s_omega`` override, ``x_omega`` is the largest value compatible with it.
    """
    k_omega = np.atleast_2d(np.asarray(k_omega, dtype=float))
    q = symmetrize(np.atleast_2d(q))
    r = symmetrize(np.atleast_2d(r))
    a_cl = sys.a + sys.b_u @ k_omega
    s_mat = solve_discrete_lyapunov(a_cl, q + k_omega.T @ r @ k_omega)
    if not check_terminal_existence(cons, tube):
        raise NoTerminalSetError("disturbance bound too large: tightened constraints leave no room")
    lam, h = _terminal_geometry(sys, tube, cons, k_omega, s_mat)
    one_m = 1.0 - tube.rho ** 2
    base = tube.gamma * tube.d_max ** 2
    f = cons.h_vec
    c = tube.c

    def s_of(x):
        return (x * lam + base) / one_m

    def rows_ok(x, s):
        return bool(np.all(np.sqrt(x) * h <= f - np.sqrt(s) * c))

    if s_omega is None:
        room = f - np.sqrt(base / one_m) * c
        pos = h > 0
        x_max = float(np.min((room[pos] / h[pos]) ** 2)) if np.any(pos) else 1e6
        lo, hi = 0.0, x_max
        for _ in range(n_bisect):
            mid = 0.5 * (lo + hi)
            if rows_ok(mid, s_of(mid)):
                lo = mid
            else:
                hi = mid
        x_omega = lo
        s_val = s_of(x_omega) if x_omega > 0 else base / one_m
    else:
        s_val = float(s_omega)
        room = f - np.sqrt(s_val) * c
        if np.any(room <= 0):
            raise NoTerminalSetError(f"s_omega={s_val} leaves no room in the tightened constraints")
        if one_m * s_val - base <= 0:
            raise NoTerminalSetError(f"s_omega={s_val} is below the disturbance floor {base / one_m:.3g}")
        x_omega = np.inf if lam == 0 else (one_m * s_val - base) / lam
        pos = h > 0
        if np.any(pos):
            x_omega = min(x_omega, float(np.min((room[pos] / h[pos]) ** 2)))
        if not np.isfinite(x_omega):
            x_omega = 1e6
        # stay strictly inside so invariance survives round-off
        x_omega *= 1.0 - 1e-9
    if x_omega <= 0:
        raise NoTerminalSetError("terminal set is empty")
    if s_val <= 0:
        s_val = base / one_m if base > 0 else np.finfo(float).tiny
    return TerminalSet(k_omega=k_omega, s_mat=s_mat, x_omega=float(x_omega), s_omega=float(s_val))


def terminal_slacks(term: TerminalSet, sys: LinearSystem, tube: TubeParams, cons: ConstraintSet,
                    q, r) -> dict:
    """Worst-case slack of each terminal condition over Omega (nonnegative means valid)."""
    a_cl = sys.a + sys.b_u @ term.k_omega
    root = inv_sqrtm(term.s_mat)
    lam, h = _terminal_geometry(sys, tube, cons, term.k_omega, term.s_mat)
    contraction = float(sym_eig(root @ a_cl.T @ term.s_mat @ a_cl @ root)[0][-1])
    q = np.atleast_2d(q)
    r = np.atleast_2d(r)
    dec = a_cl.T @ term.s_mat @ a_cl - term.s_mat + q + term.k_omega.T @ r @ term.k_omega
    s_next = tube.rho ** 2 * term.s_omega + term.x_omega * lam + tube.gamma * tube.d_max ** 2
    return {
        "invariance_x": term.x_omega * (1.0 - contraction),
        "invariance_s": term.s_omega - s_next,
        "constraints": cons.h_vec - np.sqrt(term.s_omega) * tube.c - np.sqrt(term.x_omega) * h,
        "cost_decrease": -float(sym_eig(dec)[0][-1]),
    }


def sample_terminal_conditions(term: TerminalSet, sys: LinearSystem, tube: TubeParams,
                               cons: ConstraintSet, q, r, n: int = 1000, seed: int = 0,
                               tol: float = 1e-10) -> dict:
    """Count violations of the three terminal conditions on ``n`` uniform samples of Omega.

    ``x`` is uniform in the ellipsoid ``||x||^2_S <= x_omega`` and ``s`` uniform in
    ``[0, s_omega]``.
    """
    rng = np.random.default_rng(seed)
    nx = sys.n_x
    root = inv_sqrtm(term.s_mat)
    a_cl = sys.a + sys.b_u @ term.k_omega
    c_k = sys.c + sys.d_u @ term.k_omega
    q = np.atleast_2d(q)
    r = np.atleast_2d(r)
    g = rng.standard_normal((n, nx))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    rad = rng.uniform(size=n) ** (1.0 / nx)
    xs = (np.sqrt(term.x_omega) * rad[:, None] * g) @ root
    ss = rng.uniform(0.0, term.s_omega, size=n)
    counts = {"invariance": 0, "constraints": 0, "cost_decrease": 0}
    worst = {"invariance": np.inf, "constraints": np.inf, "cost_decrease": np.inf}
    for x, s in zip(xs, ss):
        xn = a_cl @ x
        yk = c_k @ x
        sn = tube.rho ** 2 * s + float(yk @ tube.gamma_mat @ yk) + tube.gamma * tube.d_max ** 2
        slack_inv = min(term.x_omega - float(xn @ term.s_mat @ xn), term.s_omega - sn)
        u = term.k_omega @ x
        slack_con = float(np.min(cons.h_vec - np.sqrt(s) * tube.c - cons.h_mat @ np.concatenate([x, u])))
        lhs = float(xn @ term.s_mat @ xn - x @ term.s_mat @ x)
        rhs = -float(x @ q @ x + u @ r @ u)
        slack_dec = rhs - lhs
        for key, val, ref in (("invariance", slack_inv, term.s_omega),
                              ("constraints", slack_con, float(np.max(cons.h_vec))),
                              ("cost_decrease", slack_dec, float(x @ term.s_mat @ x))):
            worst[key] = min(worst[key], val)
            if val < -tol * max(1.0, ref):
                counts[key] += 1
    return {"n": n, "violations": counts, "worst_slack": worst}
