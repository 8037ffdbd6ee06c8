"""Tube-size recursions, constraint tightening and containment checks.

The tube at prediction step ``k`` is the ellipsoid ``||e||^2_{P_e} <= s_k``
around the nominal state. ``s`` is propagated by a scalar recursion that
decays at rate ``rho^2`` and is excited by the disturbance bound and the
nominal output. When the nominal initial state is re-optimised, the tube
size is re-centred by :func:`tube_measurement_update`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, List, Optional, Tuple

import numpy as np

from .linalg import inv_sqrtm, sym_eig

if TYPE_CHECKING:  # pragma: no cover
    from .iqc import ConstraintSet
    from .synthesis import TubeParams

__all__ = [
    "ContainmentBrokenError",
    "UnsupportedModeError",
    "TubeState",
    "tighten_vector",
    "tube_predict",
    "tube_measurement_update",
    "exact_update",
    "initial_tube_size",
    "Violation",
    "ContainmentReport",
    "verify_containment",
]

CLAMP_TOL = 1e-9


class ContainmentBrokenError(ValueError):
    """The previous error left its tube, so the update has no meaning."""


class UnsupportedModeError(ValueError):
    pass


@dataclass(frozen=True)
class TubeState:
    s: float
    e: Optional[np.ndarray] = None
    psi: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.s < 0:
            raise ValueError("tube size must be nonnegative")


def _qf(m, v) -> float:
    v = np.asarray(v, dtype=float).reshape(-1)
    return float(v @ m @ v)


def tighten_vector(p_e, k, cons: "ConstraintSet") -> np.ndarray:
    """Per-row back-off ``c_i = ||P_e^{-1/2} [I K^T] F_i^T||``."""
    p_e = np.asarray(p_e, dtype=float)
    k = np.atleast_2d(np.asarray(k, dtype=float))
    w, _ = sym_eig(p_e)
    if w[0] <= 0:
        raise ValueError("p_e must be positive definite")
    root = inv_sqrtm(p_e)
    f_x, f_u = cons.split(p_e.shape[0])
    g = f_x + f_u @ k            # rows are F_i [I; K]
    return np.linalg.norm(g @ root, axis=1)


def tube_predict(s: float, y_norm_sq: float, tube: "TubeParams") -> float:
    """One prediction step ``rho^2 s + gamma d_max^2 + ||y_bar||^2_Gamma``."""
    if s < 0:
        raise ValueError("tube size must be nonnegative")
    return tube.rho ** 2 * s + tube.gamma * tube.d_max ** 2 + y_norm_sq


def _root_margin(s1: float, e1, tube: "TubeParams") -> float:
    arg = s1 - _qf(tube.p_e, e1)
    if arg < 0.0:
        if arg < -CLAMP_TOL * max(1.0, abs(s1)):
            raise ContainmentBrokenError(
                f"previous error lies outside its tube by {-arg:.3g}")
        arg = 0.0
    return np.sqrt(arg)


def tube_measurement_update(s1: float, e1, e0, tube: "TubeParams") -> float:
    """Re-centre the tube on a new nominal initial state.

    Parameters
    ----------
    s1 : float
        Tube size predicted for the current time at the previous step.
    e1 : array_like
        Current state minus the nominal state predicted at the previous step.
    e0 : array_like
        Current state minus the new nominal initial state.
    """
    e0 = np.asarray(e0, dtype=float)
    e1 = np.asarray(e1, dtype=float)
    b = _root_margin(s1, e1, tube)
    delta = e0 - e1
    nd = np.sqrt(max(_qf(tube.p_diff, delta), 0.0))
    return s1 + _qf(tube.p_e, e0) - _qf(tube.p_e, e1) + nd ** 2 + 2.0 * nd * b


def exact_update(c1: float, e1, psi1, e0, tube: "TubeParams") -> float:
    """Re-centring with a known filter state ``psi1``."""
    if psi1 is None:
        raise UnsupportedModeError("exact update needs the filter state")
    psi1 = np.asarray(psi1, dtype=float).reshape(-1)
    z0 = np.concatenate([np.ravel(e0), psi1])
    z1 = np.concatenate([np.ravel(e1), psi1])
    return c1 + _qf(tube.p, z0) - _qf(tube.p, z1)


def initial_tube_size(e0, tube: "TubeParams") -> float:
    """Tube size at the first sample, with the filter at rest."""
    n = np.size(e0)
    return _qf(tube.p[:n, :n], e0)


@dataclass(frozen=True)
class Violation:
    t: int
    k: int
    slack: float


@dataclass
class ContainmentReport:
    violations: List[Violation]
    min_slack: float
    n_checked: int

    @property
    def ok(self) -> bool:
        return not self.violations


def verify_containment(points: Iterable[Tuple[int, int, np.ndarray, float]], tube: "TubeParams",
                       tol: float = 1e-9) -> ContainmentReport:
    """Check ``||e||^2_{P_e} <= s`` for every ``(t, k, e, s)`` record.

    ``tol`` absorbs floating-point dust relative to ``max(1, s)``. Objects with a
    ``containment_points()`` method (such as a simulation trace) are accepted.
    """
    if hasattr(points, "containment_points"):
        points = points.containment_points()
    viol = []
    min_slack = np.inf
    n = 0
    for t, k, e, s in points:
        slack = float(s) - _qf(tube.p_e, e)
        min_slack = min(min_slack, slack)
        n += 1
        if slack < -tol * max(1.0, abs(float(s))):
            viol.append(Violation(int(t), int(k), slack))
    return ContainmentReport(viol, float(min_slack), n)
