"""Problem configuration files and the JSON design artifact.

A configuration is a YAML mapping with the sections ``plant``,
``disturbance``, ``uncertainty``, ``constraints``, ``design``, ``terminal``,
``mpc`` and ``simulation``. Matrices are written as row-major nested lists.
Parse errors carry the line of the offending node.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import yaml

from .iqc import ConstraintSet, DisturbanceModel, IQCFilter, LinearSystem, build_delay_iqc
from .linalg import lqr_gain
from .synthesis import TerminalSet, TubeParams

__all__ = [
    "ConfigError",
    "ProblemConfig",
    "parse_config",
    "load_config",
    "dump_config",
    "save_artifact",
    "load_artifact",
    "Artifact",
]

ARTIFACT_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


def _line(node) -> Optional[int]:
    return None if node is None else node.start_mark.line + 1


class _Map:
    """Read access to a YAML mapping node that remembers source lines."""

    def __init__(self, node, where: str):
        if not isinstance(node, yaml.MappingNode):
            raise ConfigError(f"{where} must be a mapping", _line(node))
        self.node = node
        self.where = where
        self.items: Dict[str, Any] = {}
        for k, v in node.value:
            key = k.value
            if key in self.items:
                raise ConfigError(f"duplicate key {key!r} in {where}", _line(k))
            self.items[key] = v
        self.used = set()

    def has(self, key: str) -> bool:
        return key in self.items

    def get(self, key: str, required: bool = True):
        if key not in self.items:
            if required:
                raise ConfigError(f"missing key {key!r} in {self.where}", _line(self.node))
            return None
        self.used.add(key)
        return self.items[key]

    def section(self, key: str, required: bool = True) -> Optional["_Map"]:
        node = self.get(key, required)
        return None if node is None else _Map(node, f"{self.where}.{key}" if self.where else key)

    def finish(self):
        extra = set(self.items) - self.used
        if extra:
            key = sorted(extra)[0]
            raise ConfigError(f"unknown key {key!r} in {self.where or 'top level'}",
                              _line(self.items[key]))


def _scalar(node, what: str, kind=float):
    if not isinstance(node, yaml.ScalarNode):
        raise ConfigError(f"{what} must be a scalar", _line(node))
    try:
        val = yaml.safe_load(node.value) if kind is not str else node.value
        if kind is int:
            if isinstance(val, bool) or not isinstance(val, int):
                raise TypeError
            return val
        if kind is str:
            return val
        return float(val)
    except (TypeError, ValueError, yaml.YAMLError):
        raise ConfigError(f"{what}: cannot read {node.value!r} as {kind.__name__}", _line(node)) from None


def _vector(node, what: str) -> np.ndarray:
    if isinstance(node, yaml.ScalarNode):
        return np.array([_scalar(node, what)])
    if not isinstance(node, yaml.SequenceNode):
        raise ConfigError(f"{what} must be a list", _line(node))
    return np.array([_scalar(n, what) for n in node.value], dtype=float)


def _matrix(node, what: str, shape: Optional[Tuple[Optional[int], Optional[int]]] = None) -> np.ndarray:
    if isinstance(node, yaml.ScalarNode):
        m = np.array([[_scalar(node, what)]])
    elif isinstance(node, yaml.SequenceNode):
        rows = []
        for r in node.value:
            if not isinstance(r, yaml.SequenceNode):
                raise ConfigError(f"{what} must be a list of rows", _line(r))
            rows.append((r, [_scalar(n, what) for n in r.value]))
        widths = {len(v) for _, v in rows}
        if len(widths) > 1:
            bad = next(r for r, v in rows if len(v) != len(rows[0][1]))
            raise ConfigError(f"{what} has rows of unequal length", _line(bad))
        m = np.array([v for _, v in rows], dtype=float).reshape(len(rows), widths.pop() if widths else 0)
    else:
        raise ConfigError(f"{what} must be a matrix", _line(node))
    if shape is not None:
        r, c = shape
        if (r is not None and m.shape[0] != r) or (c is not None and m.shape[1] != c):
            want = f"{'?' if r is None else r}x{'?' if c is None else c}"
            raise ConfigError(f"{what} is {m.shape[0]}x{m.shape[1]}, expected {want}", _line(node))
    return m


@dataclass
class ProblemConfig:
    """Everything needed to synthesise, simulate and verify one problem."""

    sys: LinearSystem
    dist: DisturbanceModel
    tau_max: int
    cons: ConstraintSet
    rho: float
    k: np.ndarray
    gamma: float
    gamma_mat: np.ndarray
    k_omega: np.ndarray
    s_omega: Optional[float]
    q: np.ndarray
    r: np.ndarray
    horizon: int
    lqr_weights: Optional[Tuple[np.ndarray, np.ndarray]] = None
    method: str = "socp"
    init_mode: str = "free"
    tube_mode: str = "general"
    steps: int = 50
    delay_seed: int = 0
    disturbance_seed: int = 0
    disturbance: str = "uniform"
    x0: List[np.ndarray] = field(default_factory=list)

    def filter(self) -> Tuple[IQCFilter, Any]:
        return build_delay_iqc(self.tau_max, self.sys.n_y)


_METHODS = ("socp", "sqp")
_INIT = ("free", "fixed")
_TUBE = ("general", "exact")
_POLICIES = ("zero", "uniform", "vertex")


def _choice(m: _Map, key: str, options, default: str) -> str:
    node = m.get(key, required=False)
    if node is None:
        return default
    val = _scalar(node, key, str)
    if val not in options:
        raise ConfigError(f"{key} must be one of {', '.join(options)}", _line(node))
    return val


def _int(m: _Map, key: str, default: Optional[int] = None, minimum: int = 0) -> int:
    node = m.get(key, required=default is None)
    if node is None:
        return default
    val = _scalar(node, key, int)
    if val < minimum:
        raise ConfigError(f"{key} must be at least {minimum}", _line(node))
    return val


def parse_config(text: str) -> ProblemConfig:
    """Parse configuration text; raises :class:`ConfigError` with a line number."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"malformed YAML: {getattr(exc, 'problem', exc)}",
                          None if mark is None else mark.line + 1) from None
    if root is None:
        raise ConfigError("empty configuration", 1)
    top = _Map(root, "")

    pl = top.section("plant")
    a = _matrix(pl.get("a"), "plant.a")
    n = a.shape[0]
    if a.shape != (n, n) or n == 0:
        raise ConfigError("plant.a must be square and nonempty", _line(pl.get("a")))
    b_u = _matrix(pl.get("b_u"), "plant.b_u", (n, None))
    b_d = _matrix(pl.get("b_d"), "plant.b_d", (n, None))
    b_w = _matrix(pl.get("b_w"), "plant.b_w", (n, None))
    c = _matrix(pl.get("c"), "plant.c", (None, n))
    ny = c.shape[0]
    d_u = _matrix(pl.get("d_u"), "plant.d_u", (ny, b_u.shape[1]))
    d_d = _matrix(pl.get("d_d"), "plant.d_d", (ny, b_d.shape[1]))
    d_w = _matrix(pl.get("d_w"), "plant.d_w", (ny, b_w.shape[1]))
    pl.finish()
    sys = LinearSystem(a=a, b_w=b_w, b_d=b_d, b_u=b_u, c=c, d_w=d_w, d_d=d_d, d_u=d_u)

    ds = top.section("disturbance")
    xi = _matrix(ds.get("xi"), "disturbance.xi", (sys.n_d, sys.n_d))
    d_max = _scalar(ds.get("d_max"), "disturbance.d_max")
    ds.finish()
    try:
        dist = DisturbanceModel(xi=xi, d_max=d_max)
    except ValueError as exc:
        raise ConfigError(str(exc), _line(ds.node)) from None

    un = top.section("uncertainty")
    tau_max = _int(un, "tau_max", minimum=1)
    un.finish()
    if sys.n_w != sys.n_y:
        raise ConfigError("the delay channel needs as many w as y signals", _line(pl.node))

    cs = top.section("constraints")
    h_node = cs.get("h_mat")
    h_mat = _matrix(h_node, "constraints.h_mat")
    if h_mat.shape[0] == 0:
        raise ConfigError("constraint set is empty", _line(h_node))
    if h_mat.shape[1] != n + sys.n_u:
        raise ConfigError(f"constraints.h_mat needs {n + sys.n_u} columns", _line(h_node))
    h_vec = _vector(cs.get("h_vec"), "constraints.h_vec")
    if h_vec.size != h_mat.shape[0]:
        raise ConfigError("constraints.h_vec length differs from the number of rows", _line(cs.get("h_vec")))
    cs.finish()
    try:
        cons = ConstraintSet(h_mat=h_mat, h_vec=h_vec)
    except ValueError as exc:
        raise ConfigError(str(exc), _line(cs.node)) from None

    de = top.section("design")
    rho_node = de.get("rho")
    rho = _scalar(rho_node, "design.rho")
    if not 0.0 < rho < 1.0:
        raise ConfigError("design.rho must lie strictly between 0 and 1", _line(rho_node))
    lqr = None
    if de.has("k") == de.has("lqr"):
        raise ConfigError("design needs exactly one of 'k' or 'lqr'", _line(de.node))
    if de.has("k"):
        k = _matrix(de.get("k"), "design.k", (sys.n_u, n))
    else:
        lq = de.section("lqr")
        wq = _matrix(lq.get("q"), "design.lqr.q", (n, n))
        wr = _matrix(lq.get("r"), "design.lqr.r", (sys.n_u, sys.n_u))
        lq.finish()
        lqr = (wq, wr)
        try:
            k = lqr_gain(sys.a, sys.b_u, wq, wr)
        except Exception as exc:
            raise ConfigError(f"LQR helper failed: {exc}", _line(lq.node)) from None
    gamma = _scalar(de.get("gamma"), "design.gamma")
    g_node = de.get("gamma_mat")
    gamma_mat = _matrix(g_node, "design.gamma_mat", (ny, ny))
    if gamma <= 0 or np.min(np.linalg.eigvalsh(0.5 * (gamma_mat + gamma_mat.T))) <= 0:
        raise ConfigError("design.gamma and design.gamma_mat must be positive definite", _line(g_node))
    de.finish()

    te = top.section("terminal")
    k_omega = _matrix(te.get("k_omega"), "terminal.k_omega", (sys.n_u, n))
    s_node = te.get("s_omega", required=False)
    s_omega = None if s_node is None else _scalar(s_node, "terminal.s_omega")
    if s_omega is not None and s_omega <= 0:
        raise ConfigError("terminal.s_omega must be positive", _line(s_node))
    te.finish()

    mp = top.section("mpc")
    q = _matrix(mp.get("q"), "mpc.q", (n, n))
    r = _matrix(mp.get("r"), "mpc.r", (sys.n_u, sys.n_u))
    horizon = _int(mp, "horizon", minimum=1)
    method = _choice(mp, "method", _METHODS, "socp")
    init_mode = _choice(mp, "init_mode", _INIT, "free")
    tube_mode = _choice(mp, "tube_mode", _TUBE, "general")
    mp.finish()

    si = top.section("simulation", required=False)
    steps, dseed, wseed, policy, x0 = 50, 0, 0, "uniform", []
    if si is not None:
        steps = _int(si, "steps", 50, minimum=0)
        dseed = _int(si, "delay_seed", 0)
        wseed = _int(si, "disturbance_seed", 0)
        policy = _choice(si, "disturbance", _POLICIES, "uniform")
        x_node = si.get("x0", required=False)
        if x_node is not None:
            x0 = list(_matrix(x_node, "simulation.x0", (None, n)))
        si.finish()
    top.finish()

    return ProblemConfig(sys=sys, dist=dist, tau_max=tau_max, cons=cons, rho=rho, k=k, gamma=gamma,
                         gamma_mat=gamma_mat, k_omega=k_omega, s_omega=s_omega, q=q, r=r,
                         horizon=horizon, lqr_weights=lqr, method=method, init_mode=init_mode,
                         tube_mode=tube_mode, steps=steps, delay_seed=dseed, disturbance_seed=wseed,
                         disturbance=policy, x0=x0)


def load_config(path) -> ProblemConfig:
    return parse_config(Path(path).read_text())


def _lst(m) -> list:
    return np.asarray(m, dtype=float).tolist()


def config_to_dict(cfg: ProblemConfig) -> dict:
    s = cfg.sys
    design: Dict[str, Any] = {"rho": cfg.rho}
    if cfg.lqr_weights is not None:
        design["lqr"] = {"q": _lst(cfg.lqr_weights[0]), "r": _lst(cfg.lqr_weights[1])}
    else:
        design["k"] = _lst(cfg.k)
    design["gamma"] = cfg.gamma
    design["gamma_mat"] = _lst(cfg.gamma_mat)
    terminal: Dict[str, Any] = {"k_omega": _lst(cfg.k_omega)}
    if cfg.s_omega is not None:
        terminal["s_omega"] = cfg.s_omega
    sim: Dict[str, Any] = {"steps": cfg.steps, "delay_seed": cfg.delay_seed,
                           "disturbance_seed": cfg.disturbance_seed, "disturbance": cfg.disturbance}
    if cfg.x0:
        sim["x0"] = [_lst(x) for x in cfg.x0]
    return {
        "plant": {"a": _lst(s.a), "b_w": _lst(s.b_w), "b_d": _lst(s.b_d), "b_u": _lst(s.b_u),
                  "c": _lst(s.c), "d_w": _lst(s.d_w), "d_d": _lst(s.d_d), "d_u": _lst(s.d_u)},
        "disturbance": {"xi": _lst(cfg.dist.xi), "d_max": cfg.dist.d_max},
        "uncertainty": {"tau_max": cfg.tau_max},
        "constraints": {"h_mat": _lst(cfg.cons.h_mat), "h_vec": _lst(cfg.cons.h_vec)},
        "design": design,
        "terminal": terminal,
        "mpc": {"q": _lst(cfg.q), "r": _lst(cfg.r), "horizon": cfg.horizon, "method": cfg.method,
                "init_mode": cfg.init_mode, "tube_mode": cfg.tube_mode},
        "simulation": sim,
    }


class _FlowRows(yaml.SafeDumper):
    pass


def _repr_list(dumper, data):
    flow = all(not isinstance(x, (list, dict)) for x in data)
    return dumper.represent_sequence("tag:yaml.org,2002:seq", data, flow_style=flow)


_FlowRows.add_representer(list, _repr_list)


def dump_config(cfg: ProblemConfig) -> str:
    """Serialise to YAML text that parses back to an equal configuration."""
    return yaml.dump(config_to_dict(cfg), Dumper=_FlowRows, sort_keys=False)


# -- design artifact ------------------------------------------------------

@dataclass
class Artifact:
    tube: TubeParams
    terminal: TerminalSet
    filt: IQCFilter
    tau_max: int


def _arr(d: dict, key: str) -> np.ndarray:
    return np.asarray(d[key], dtype=float)


def artifact_to_dict(art: Artifact) -> dict:
    t, term, f = art.tube, art.terminal, art.filt
    info = {k: v for k, v in t.info.items() if isinstance(v, (int, float, str, bool))}
    return {
        "version": ARTIFACT_VERSION,
        "tau_max": art.tau_max,
        "tube": {"rho": t.rho, "p": _lst(t.p), "p_e": _lst(t.p_e), "p_diff": _lst(t.p_diff),
                 "gamma": t.gamma, "gamma_mat": _lst(t.gamma_mat), "k": _lst(t.k), "c": _lst(t.c),
                 "d_max": t.d_max, "m": None if t.m is None else _lst(t.m),
                 "x_mult": None if t.x_mult is None else _lst(t.x_mult), "info": info},
        "terminal": {"k_omega": _lst(term.k_omega), "s_mat": _lst(term.s_mat),
                     "x_omega": term.x_omega, "s_omega": term.s_omega},
        "filter": {k: _lst(getattr(f, k)) for k in
                   ("a_psi", "b_psi1", "b_psi2", "c_psi", "d_psi1", "d_psi2")},
    }


def artifact_from_dict(d: dict) -> Artifact:
    try:
        if d.get("version") != ARTIFACT_VERSION:
            raise ConfigError(f"unsupported artifact version {d.get('version')!r}")
        t = d["tube"]
        tube = TubeParams(rho=float(t["rho"]), p=_arr(t, "p"), p_e=_arr(t, "p_e"), p_diff=_arr(t, "p_diff"),
                          gamma=float(t["gamma"]), gamma_mat=np.atleast_2d(_arr(t, "gamma_mat")),
                          k=np.atleast_2d(_arr(t, "k")), c=_arr(t, "c"), d_max=float(t["d_max"]),
                          m=None if t.get("m") is None else _arr(t, "m"),
                          x_mult=None if t.get("x_mult") is None else np.atleast_2d(_arr(t, "x_mult")),
                          info=dict(t.get("info", {})))
        e = d["terminal"]
        term = TerminalSet(k_omega=np.atleast_2d(_arr(e, "k_omega")), s_mat=_arr(e, "s_mat"),
                           x_omega=float(e["x_omega"]), s_omega=float(e["s_omega"]))
        f = d["filter"]
        filt = IQCFilter(**{k: np.asarray(v, dtype=float) for k, v in f.items()})
        return Artifact(tube=tube, terminal=term, filt=filt, tau_max=int(d["tau_max"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"malformed artifact: {exc}") from None


def save_artifact(art: Artifact, path) -> None:
    Path(path).write_text(json.dumps(artifact_to_dict(art), indent=1))


def load_artifact(path) -> Artifact:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"artifact is not valid JSON: {exc.msg}", exc.lineno) from None
    return artifact_from_dict(d)


def check_compatible(cfg: ProblemConfig, art: Artifact) -> None:
    """Raise :class:`ConfigError` when artifact and configuration disagree on dimensions."""
    n = cfg.sys.n_x
    if art.tube.n_x != n or art.tube.k.shape != (cfg.sys.n_u, n):
        raise ConfigError("artifact state/input dimensions do not match the configuration")
    if art.tube.c.size != cfg.cons.n_c:
        raise ConfigError("artifact tightening does not match the constraint rows")
    if art.tau_max != cfg.tau_max:
        raise ConfigError("artifact delay bound does not match the configuration")
    if art.tube.p.shape[0] != n + art.filt.n_psi:
        raise ConfigError("artifact P does not match the filter dimension")


def with_changes(cfg: ProblemConfig, **kw) -> ProblemConfig:
    out = copy.copy(cfg)
    for k, v in kw.items():
        setattr(out, k, v)
    return out
