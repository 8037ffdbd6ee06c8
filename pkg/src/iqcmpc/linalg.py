"""Small dense linear-algebra kernel.

Everything here works on plain ``numpy`` arrays of modest size (n <= ~16).
The symmetric eigensolver is a cyclic Jacobi iteration; the other routines
(definiteness tests, matrix square roots, Schur complements, Lyapunov and
Riccati solves) are built on top of it or on direct linear solves.
"""
from __future__ import annotations

import enum

import numpy as np

__all__ = [
    "NumericalError",
    "IllConditionedPartitionError",
    "NotSchurStableError",
    "NotStabilizableError",
    "Definiteness",
    "symmetrize",
    "sym_eig",
    "definiteness",
    "sqrtm_psd",
    "inv_sqrtm",
    "schur_reduce",
    "spectral_radius",
    "solve_discrete_lyapunov",
    "solve_dare",
    "lqr_gain",
]

SYM_RTOL = 1e-12


class NumericalError(RuntimeError):
    """An iterative routine failed to converge or met a degenerate input."""


class IllConditionedPartitionError(NumericalError):
    pass


class NotSchurStableError(NumericalError):
    pass


class NotStabilizableError(NumericalError):
    pass


class Definiteness(enum.Enum):
    POS_DEF = "PosDef"
    NEG_DEF = "NegDef"
    INDEFINITE = "Indefinite"
    SINGULAR = "Singular"


def symmetrize(m, rtol: float = SYM_RTOL, check: bool = True) -> np.ndarray:
    """Return ``(m + m.T) / 2`` after checking that ``m`` is square and symmetric."""
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if check:
        scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
        if np.max(np.abs(m - m.T), initial=0.0) > rtol * scale:
            raise ValueError("matrix is not symmetric")
    return 0.5 * (m + m.T)


def sym_eig(m, tol: float = 1e-14, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Parameters
    ----------
    m : (n, n) array_like
        Symmetric matrix.
    tol : float
        Sweeps stop once the off-diagonal Frobenius norm drops below
        ``tol * ||m||_F``.
    max_sweeps : int
        Iteration cap; exceeding it raises :class:`NumericalError`.

    Returns
    -------
    w : (n,) ndarray
        Eigenvalues in ascending order.
    v : (n, n) ndarray
        Orthonormal eigenvectors, ``v[:, i]`` belongs to ``w[i]``.
    """
    a = symmetrize(m).copy()
    n = a.shape[0]
    v = np.eye(n)
    if n == 0:
        return np.zeros(0), v
    fro = np.linalg.norm(a)
    if fro == 0.0:
        return np.zeros(n), v
    target = tol * fro
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= target:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.copysign(1.0, theta) / (abs(theta) + np.hypot(1.0, theta))
                c = 1.0 / np.hypot(1.0, t)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise NumericalError(f"Jacobi iteration did not converge in {max_sweeps} sweeps")
    w = np.diag(a).copy()
    order = np.argsort(w)
    return w[order], v[:, order]


def definiteness(m, margin: float = 0.0) -> Definiteness:
    """Classify a symmetric matrix by its extreme eigenvalues.

    ``PosDef`` iff lambda_min > margin, ``NegDef`` iff lambda_max < -margin,
    ``Singular`` iff some |lambda| <= margin, otherwise ``Indefinite``.
    """
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    w, _ = sym_eig(m)
    if w.size == 0:
        return Definiteness.SINGULAR
    if w[0] > margin:
        return Definiteness.POS_DEF
    if w[-1] < -margin:
        return Definiteness.NEG_DEF
    if np.any(np.abs(w) <= margin):
        return Definiteness.SINGULAR
    return Definiteness.INDEFINITE


def sqrtm_psd(m) -> np.ndarray:
    """Symmetric square root of a positive semidefinite matrix."""
    w, v = sym_eig(m)
    scale = max(1.0, float(np.max(np.abs(w)))) if w.size else 1.0
    if w.size and w[0] < -1e-10 * scale:
        raise ValueError("matrix is not positive semidefinite")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def inv_sqrtm(m, max_cond: float = 1e12) -> np.ndarray:
    """Inverse symmetric square root of a positive definite matrix."""
    w, v = sym_eig(m)
    if w.size == 0:
        return np.zeros((0, 0))
    if w[0] <= 0:
        raise ValueError("matrix is not positive definite")
    if w[-1] / w[0] > max_cond:
        raise NumericalError(f"condition number {w[-1] / w[0]:.3g} exceeds {max_cond:g}")
    return (v / np.sqrt(w)) @ v.T


def schur_reduce(p, split: int):
    """Split ``P = [[P11, P21^T], [P21, P22]]`` at ``split`` and reduce.

    Returns ``(p_e, p_diff)`` with ``p_e = P11 - P21^T P22^{-1} P21`` and
    ``p_diff = P11 - p_e``.
    """
    p = symmetrize(p)
    n = p.shape[0]
    if not 0 < split <= n:
        raise ValueError(f"split must lie in (0, {n}]")
    p11 = p[:split, :split]
    if split == n:
        return p11.copy(), np.zeros_like(p11)
    p21 = p[split:, :split]
    p22 = p[split:, split:]
    w, _ = sym_eig(p22)
    if w[0] <= 0 or w[-1] / w[0] > 1e12:
        raise IllConditionedPartitionError("lower-right block P22 is singular or ill-conditioned")
    p_diff = symmetrize(p21.T @ np.linalg.solve(p22, p21), check=False)
    p_e = p11 - p_diff
    return p_e, p_diff


def spectral_radius(a) -> float:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(a))))


def solve_discrete_lyapunov(a_cl, q) -> np.ndarray:
    """Solve ``a_cl^T S a_cl - S = -q`` for ``S``.

    Uses the Kronecker-vectorised linear system, which is exact up to
    round-off for the small dimensions handled here.
    """
    a_cl = np.atleast_2d(np.asarray(a_cl, dtype=float))
    q = symmetrize(q)
    n = a_cl.shape[0]
    if a_cl.shape != (n, n) or q.shape != (n, n):
        raise ValueError("dimension mismatch between a_cl and q")
    if spectral_radius(a_cl) >= 1.0:
        raise NotSchurStableError("closed-loop matrix is not Schur stable")
    # vec(A^T S A) = kron(A^T, A^T) vec(S) for row-major vec
    lhs = np.eye(n * n) - np.kron(a_cl.T, a_cl.T)
    s = np.linalg.solve(lhs, q.reshape(-1)).reshape(n, n)
    return symmetrize(s, check=False)


def solve_dare(a, b, q, r, max_iter: int = 10_000, tol: float = 1e-12):
    """Stabilising solution ``X`` of the discrete Riccati equation and its gain.

    The Riccati map is iterated from ``X = q``; the gain uses the convention
    ``u = gain @ x``, i.e. ``gain = -(r + b^T X b)^{-1} b^T X a``.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    q = symmetrize(q)
    r = symmetrize(r)
    x = q.copy()
    for _ in range(max_iter):
        bx = b.T @ x
        gain = -np.linalg.solve(r + bx @ b, bx @ a)
        x_next = symmetrize(q + a.T @ x @ a + a.T @ x @ b @ gain, check=False)
        if not np.all(np.isfinite(x_next)) or np.max(np.abs(x_next)) > 1e14:
            raise NotStabilizableError("Riccati iteration diverged")
        if np.max(np.abs(x_next - x)) <= tol * max(1.0, np.max(np.abs(x_next))):
            x = x_next
            break
        x = x_next
    else:
        raise NotStabilizableError(f"Riccati iteration did not converge in {max_iter} steps")
    bx = b.T @ x
    gain = -np.linalg.solve(r + bx @ b, bx @ a)
    if spectral_radius(a + b @ gain) >= 1.0:
        raise NotStabilizableError("Riccati fixed point does not stabilise (a, b)")
    return x, gain


def lqr_gain(a, b, q, r, max_iter: int = 10_000, tol: float = 1e-12) -> np.ndarray:
    """Infinite-horizon discrete LQR gain with convention ``u = gain @ x``."""
    return solve_dare(a, b, q, r, max_iter=max_iter, tol=tol)[1]
