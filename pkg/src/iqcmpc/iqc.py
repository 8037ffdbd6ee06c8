"""Plant, IQC filter and multiplier data model.

Includes the augmented plant used by the stability and design LMIs, the
filter for a time-varying input delay together with its family of
delay-wise multiplier bounds, and the delay operator itself.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .linalg import symmetrize

__all__ = [
    "LinearSystem",
    "DisturbanceModel",
    "IQCFilter",
    "Multiplier",
    "ConstraintSet",
    "DelayUncertainty",
    "AugmentedPlant",
    "DelayMultiplierFamily",
    "assemble_augmented",
    "build_delay_iqc",
    "filter_step",
    "delay_operator",
]


def _mat(x, rows=None, cols=None, name="matrix"):
    m = np.asarray(x, dtype=float)
    if m.ndim == 1 and m.size == 0:
        m = m.reshape(rows or 0, cols or 0)
    m = np.atleast_2d(m) if m.ndim < 2 else m
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D")
    if rows is not None and m.shape[0] != rows:
        raise ValueError(f"{name} has {m.shape[0]} rows, expected {rows}")
    if cols is not None and m.shape[1] != cols:
        raise ValueError(f"{name} has {m.shape[1]} columns, expected {cols}")
    return m


@dataclass(frozen=True)
class LinearSystem:
    """``x+ = A x + B_w w + B_d d + B_u u``, ``y = C x + D_w w + D_d d + D_u u``."""

    a: np.ndarray
    b_w: np.ndarray
    b_d: np.ndarray
    b_u: np.ndarray
    c: np.ndarray
    d_w: np.ndarray
    d_d: np.ndarray
    d_u: np.ndarray

    def __post_init__(self):
        a = _mat(self.a, name="a")
        n = a.shape[0]
        if a.shape != (n, n):
            raise ValueError("a must be square")
        b_w = _mat(self.b_w, rows=n, name="b_w")
        b_d = _mat(self.b_d, rows=n, name="b_d")
        b_u = _mat(self.b_u, rows=n, name="b_u")
        c = _mat(self.c, cols=n, name="c")
        ny = c.shape[0]
        d_w = _mat(self.d_w, rows=ny, cols=b_w.shape[1], name="d_w")
        d_d = _mat(self.d_d, rows=ny, cols=b_d.shape[1], name="d_d")
        d_u = _mat(self.d_u, rows=ny, cols=b_u.shape[1], name="d_u")
        for k, v in dict(a=a, b_w=b_w, b_d=b_d, b_u=b_u, c=c, d_w=d_w, d_d=d_d, d_u=d_u).items():
            object.__setattr__(self, k, v)

    @property
    def n_x(self) -> int:
        return self.a.shape[0]

    @property
    def n_w(self) -> int:
        return self.b_w.shape[1]

    @property
    def n_d(self) -> int:
        return self.b_d.shape[1]

    @property
    def n_u(self) -> int:
        return self.b_u.shape[1]

    @property
    def n_y(self) -> int:
        return self.c.shape[0]

    def step(self, x, u, w, d):
        """One step of the true plant; returns ``(x_next, y)``."""
        x_next = self.a @ x + self.b_w @ w + self.b_d @ d + self.b_u @ u
        y = self.c @ x + self.d_w @ w + self.d_d @ d + self.d_u @ u
        return x_next, y


@dataclass(frozen=True)
class DisturbanceModel:
    """Disturbance set ``{d : d^T xi d <= d_max^2}``."""

    xi: np.ndarray
    d_max: float

    def __post_init__(self):
        xi = symmetrize(self.xi)
        if xi.size and np.min(np.linalg.eigvalsh(xi)) <= 0:
            raise ValueError("xi must be positive definite")
        if self.d_max < 0:
            raise ValueError("d_max must be nonnegative")
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "d_max", float(self.d_max))


@dataclass(frozen=True)
class IQCFilter:
    """State-space filter driven by ``(y, w)`` with output ``z``; psi_0 = 0."""

    a_psi: np.ndarray
    b_psi1: np.ndarray
    b_psi2: np.ndarray
    c_psi: np.ndarray
    d_psi1: np.ndarray
    d_psi2: np.ndarray

    def __post_init__(self):
        b1 = _mat(self.b_psi1, name="b_psi1")
        npsi = b1.shape[0]
        a = _mat(self.a_psi, rows=npsi, cols=npsi, name="a_psi")
        b2 = _mat(self.b_psi2, rows=npsi, name="b_psi2")
        d1 = _mat(self.d_psi1, cols=b1.shape[1], name="d_psi1")
        c = _mat(self.c_psi, rows=d1.shape[0], cols=npsi, name="c_psi")
        d2 = _mat(self.d_psi2, rows=d1.shape[0], cols=b2.shape[1], name="d_psi2")
        for k, v in dict(a_psi=a, b_psi1=b1, b_psi2=b2, c_psi=c, d_psi1=d1, d_psi2=d2).items():
            object.__setattr__(self, k, v)

    @property
    def n_psi(self) -> int:
        return self.a_psi.shape[0]

    @property
    def n_z(self) -> int:
        return self.c_psi.shape[0]

    @property
    def n_y(self) -> int:
        return self.b_psi1.shape[1]

    @property
    def n_w(self) -> int:
        return self.b_psi2.shape[1]

    def initial_state(self) -> np.ndarray:
        return np.zeros(self.n_psi)


@dataclass(frozen=True)
class Multiplier:
    m: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "m", symmetrize(self.m))


@dataclass(frozen=True)
class ConstraintSet:
    """Polytopic constraints ``h_mat @ [x; u] <= h_vec``."""

    h_mat: np.ndarray
    h_vec: np.ndarray

    def __post_init__(self):
        h = _mat(self.h_mat, name="h_mat")
        f = np.asarray(self.h_vec, dtype=float).reshape(-1)
        if h.shape[0] == 0:
            raise ValueError("constraint set is empty")
        if f.shape[0] != h.shape[0]:
            raise ValueError("h_vec length does not match the rows of h_mat")
        object.__setattr__(self, "h_mat", h)
        object.__setattr__(self, "h_vec", f)

    @property
    def n_c(self) -> int:
        return self.h_mat.shape[0]

    def split(self, n_x: int):
        """Return the state and input parts ``(F_x, F_u)`` of ``h_mat``."""
        return self.h_mat[:, :n_x], self.h_mat[:, n_x:]

    def violation(self, x, u) -> np.ndarray:
        """Row-wise ``F [x; u] - f`` (positive entries are violations)."""
        return self.h_mat @ np.concatenate([np.ravel(x), np.ravel(u)]) - self.h_vec


class DelayUncertainty:
    """Source of delays ``tau_t`` in ``[0, tau_max]``.

    Either replays a fixed ``schedule`` (repeating its last entry once it is
    exhausted) or draws uniformly at random from a generator seeded with
    ``seed``. A seed is mandatory for random schedules.
    """

    def __init__(self, tau_max: int, schedule: Optional[Sequence[int]] = None,
                 seed: Optional[int] = None):
        if tau_max < 0:
            raise ValueError("tau_max must be nonnegative")
        self.tau_max = int(tau_max)
        if schedule is None and seed is None:
            raise ValueError("a random delay schedule needs an explicit seed")
        if schedule is not None:
            schedule = [int(t) for t in schedule]
            if not schedule:
                raise ValueError("schedule must not be empty")
            if any(t < 0 or t > tau_max for t in schedule):
                raise ValueError("schedule entries must lie in [0, tau_max]")
        self.schedule = schedule
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    @classmethod
    def constant(cls, tau_max: int, tau: int) -> "DelayUncertainty":
        return cls(tau_max, schedule=[tau])

    def reset(self):
        self._rng = np.random.default_rng(self.seed)

    def draw(self, t: int) -> int:
        if self.schedule is not None:
            return self.schedule[min(t, len(self.schedule) - 1)]
        return int(self._rng.integers(0, self.tau_max + 1))

    def sequence(self, n: int) -> np.ndarray:
        self.reset()
        return np.array([self.draw(t) for t in range(n)], dtype=int)


@dataclass(frozen=True)
class AugmentedPlant:
    """Error system in series with the IQC filter, driven by ``w``.

    ``a_tilde`` acts on the joint state ``[e; psi]``; ``b_d_tilde`` and
    ``b_y_tilde`` (with feedthroughs ``d_d_tilde``, ``d_y_tilde``) are the
    disturbance and nominal-output channels.
    """

    a_tilde: np.ndarray
    b_tilde: np.ndarray
    c_tilde: np.ndarray
    d_tilde: np.ndarray
    b_d_tilde: np.ndarray
    b_y_tilde: np.ndarray
    d_d_tilde: np.ndarray
    d_y_tilde: np.ndarray
    n_x: int
    n_psi: int

    @property
    def n_xi(self) -> int:
        return self.n_x + self.n_psi


def assemble_augmented(sys: LinearSystem, k, filt: IQCFilter) -> AugmentedPlant:
    """Stack the error dynamics ``A_K = A + B_u K``, ``C_K = C + D_u K`` with the filter."""
    k = _mat(k, rows=sys.n_u, cols=sys.n_x, name="k")
    if filt.n_y != sys.n_y or filt.n_w != sys.n_w:
        raise ValueError("filter input dimensions do not match the plant's (y, w)")
    npsi = filt.n_psi
    a_k = sys.a + sys.b_u @ k
    c_k = sys.c + sys.d_u @ k
    a_tilde = np.block([
        [a_k, np.zeros((sys.n_x, npsi))],
        [filt.b_psi1 @ c_k, filt.a_psi],
    ])
    b_tilde = np.vstack([sys.b_w, filt.b_psi1 @ sys.d_w + filt.b_psi2])
    c_tilde = np.hstack([filt.d_psi1 @ c_k, filt.c_psi])
    d_tilde = filt.d_psi1 @ sys.d_w + filt.d_psi2
    b_d_tilde = np.vstack([sys.b_d, filt.b_psi1 @ sys.d_d])
    b_y_tilde = np.vstack([np.zeros((sys.n_x, sys.n_y)), filt.b_psi1])
    return AugmentedPlant(
        a_tilde=a_tilde, b_tilde=b_tilde, c_tilde=c_tilde, d_tilde=d_tilde,
        b_d_tilde=b_d_tilde, b_y_tilde=b_y_tilde,
        d_d_tilde=filt.d_psi1 @ sys.d_d, d_y_tilde=filt.d_psi1.copy(),
        n_x=sys.n_x, n_psi=npsi,
    )


@dataclass(frozen=True)
class DelayMultiplierFamily:
    """Lower bounds ``M >= M_tau(X) = diag(X_tau, -X)`` for ``tau = 0..tau_max``.

    ``X_tau = diag(0_{tau_max - tau}, ones(tau, tau)) kron X``.
    """

    tau_max: int
    n_y: int

    def m_tau(self, tau: int, x) -> np.ndarray:
        if not 0 <= tau <= self.tau_max:
            raise ValueError("tau out of range")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        pattern = np.zeros((self.tau_max, self.tau_max))
        pattern[self.tau_max - tau:, self.tau_max - tau:] = 1.0
        n = self.tau_max * self.n_y
        out = np.zeros((n + self.n_y, n + self.n_y))
        out[:n, :n] = np.kron(pattern, x)
        out[n:, n:] = -x
        return out

    def generators(self, x) -> list:
        return [self.m_tau(tau, x) for tau in range(self.tau_max + 1)]

    def min_slack(self, m, x) -> float:
        """Smallest eigenvalue of ``M - M_tau(X)`` over all delays."""
        return min(float(np.min(np.linalg.eigvalsh(symmetrize(m - g, check=False))))
                   for g in self.generators(x))


def build_delay_iqc(tau_max: int, n_y: int):
    """Filter and multiplier family for ``w_t = y_{t - tau_t} - y_t``.

    The filter state stores ``[y_{t-tau_max}; ...; y_{t-1}]`` and the output is
    the vector of successive differences of that history followed by ``w``.
    """
    if tau_max < 1 or n_y < 1:
        raise ValueError("tau_max and n_y must be at least 1")
    eye = np.eye(n_y)
    npsi = tau_max * n_y
    nz = (tau_max + 1) * n_y
    a_psi = np.kron(np.eye(tau_max, k=1), eye)
    b_psi1 = np.zeros((npsi, n_y))
    b_psi1[-n_y:, :] = eye
    b_psi2 = np.zeros((npsi, n_y))
    c_psi = np.zeros((nz, npsi))
    c_psi[:npsi, :] = np.kron(np.eye(tau_max) - np.eye(tau_max, k=1), eye)
    d_psi1 = np.zeros((nz, n_y))
    d_psi1[npsi - n_y:npsi, :] = -eye
    d_psi2 = np.zeros((nz, n_y))
    d_psi2[npsi:, :] = eye
    filt = IQCFilter(a_psi=a_psi, b_psi1=b_psi1, b_psi2=b_psi2,
                     c_psi=c_psi, d_psi1=d_psi1, d_psi2=d_psi2)
    return filt, DelayMultiplierFamily(tau_max=tau_max, n_y=n_y)


def filter_step(filt: IQCFilter, psi, y, w):
    """Advance the filter one step; returns ``(psi_next, z)``."""
    psi = np.asarray(psi, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    w = np.asarray(w, dtype=float).reshape(-1)
    if psi.size != filt.n_psi or y.size != filt.n_y or w.size != filt.n_w:
        raise ValueError("dimension mismatch in filter_step")
    psi_next = filt.a_psi @ psi + filt.b_psi1 @ y + filt.b_psi2 @ w
    z = filt.c_psi @ psi + filt.d_psi1 @ y + filt.d_psi2 @ w
    return psi_next, z


def delay_operator(history: Sequence, tau_t: int, tau_max: Optional[int] = None):
    """Return ``y_{t - tau_t} - y_t`` where ``history[-1]`` is ``y_t``.

    Entries before the start of ``history`` are taken as zero.
    """
    if tau_t < 0 or (tau_max is not None and tau_t > tau_max):
        raise ValueError(f"delay {tau_t} outside [0, {tau_max}]")
    if len(history) == 0:
        raise ValueError("history must contain at least the current output")
    y_t = np.asarray(history[-1], dtype=float)
    if tau_t == 0:
        return np.zeros_like(y_t)
    idx = len(history) - 1 - tau_t
    past = np.asarray(history[idx], dtype=float) if idx >= 0 else np.zeros_like(y_t)
    return past - y_t
