"""Command-line front end: ``iqcmpc synthesize|simulate|verify|export``.

Exit codes
----------
0 success, 1 I/O failure, 2 usage error, 3 configuration or artifact parse
error, 4 synthesis infeasible, 5 initial state infeasible, 6 verification
failed.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .config import (Artifact, ConfigError, ProblemConfig, artifact_to_dict, check_compatible,
                     dump_config, load_artifact, load_config, save_artifact)
from .iqc import DelayUncertainty, assemble_augmented
from .linalg import sym_eig
from .mpc import MPCConfig, TubeMPC
from .sim import DisturbancePolicy, brute_force_worst_error, closed_loop_run, export_trace
from .synthesis import (DesignInfeasibleError, NoTerminalSetError, check_terminal_existence,
                        design_lmi_max_eig, minimize_tightening, sample_terminal_conditions,
                        terminal_ingredients, terminal_slacks)
from .tube import tighten_vector, tube_predict, verify_containment

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_SYNTHESIS = 4
EXIT_INITIAL = 5
EXIT_VERIFY = 6


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _vec(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.replace(" ", "").split(",") if v], dtype=float)
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot read {text!r} as a comma-separated vector") from None


# -- synthesis -----------------------------------------------------------------

def synthesize(cfg: ProblemConfig) -> Artifact:
    """Tube shape, tightening and terminal ingredients for ``cfg``."""
    filt, family = cfg.filter()
    tube = minimize_tightening(cfg.sys, filt, cfg.cons, cfg.k, cfg.rho, cfg.dist, cfg.gamma,
                               cfg.gamma_mat, family=family)
    term = terminal_ingredients(cfg.sys, tube, cfg.cons, cfg.q, cfg.r, cfg.k_omega, s_omega=cfg.s_omega)
    return Artifact(tube=tube, terminal=term, filt=filt, tau_max=cfg.tau_max)


def mpc_config(cfg: ProblemConfig, art: Artifact) -> MPCConfig:
    return MPCConfig(sys=cfg.sys, cons=cfg.cons, tube=art.tube, terminal=art.terminal,
                     q=cfg.q, r=cfg.r, horizon=cfg.horizon)


def run_simulation(cfg: ProblemConfig, art: Artifact, x0, steps: int, delay_seed: int,
                   disturbance_seed: int, policy: Optional[str] = None):
    mcfg = mpc_config(cfg, art)
    ctrl = TubeMPC(mcfg, method=cfg.method, init_mode=cfg.init_mode, tube_mode=cfg.tube_mode,
                   n_psi=art.filt.n_psi)
    unc = DelayUncertainty(cfg.tau_max, seed=delay_seed)
    pol = DisturbancePolicy(policy or cfg.disturbance, cfg.dist, seed=disturbance_seed)
    return closed_loop_run(cfg.sys, unc, ctrl, x0, steps, pol, filt=art.filt)


# -- verification ----------------------------------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    value: float
    detail: str = ""

    def as_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "value": float(self.value),
                "detail": self.detail}


def _guard(name: str, fn: Callable[[], Check]) -> Check:
    try:
        return fn()
    except Exception as exc:  # a crash in one check is a failed check, not a crash of the report
        return Check(name, False, float("nan"), f"{type(exc).__name__}: {exc}")


def verify_artifact(cfg: ProblemConfig, art: Artifact, n_samples: int = 1000, seed: int = 0,
                    oracle_horizon: int = 4) -> List[Check]:
    """Independent re-checks of a design artifact against its configuration."""
    tube, term, filt = art.tube, art.terminal, art.filt
    sys_ = cfg.sys
    n = sys_.n_x
    scale = max(1.0, tube.gamma, float(np.max(np.abs(tube.gamma_mat))))
    _, family = cfg.filter()

    def lmi():
        if tube.m is None:
            return Check("design_lmi", False, float("nan"), "artifact has no multiplier")
        aug = assemble_augmented(sys_, tube.k, filt)
        lam = design_lmi_max_eig(aug, tube.p, tube.m, tube.rho, tube.gamma, tube.gamma_mat, cfg.dist.xi)
        return Check("design_lmi", lam < 0.0, lam, f"max eigenvalue (scale {scale:.3g})")

    def pos():
        lp = float(sym_eig(tube.p)[0][0])
        le = float(sym_eig(tube.p_e)[0][0])
        ld = float(sym_eig(tube.p_diff)[0][0])
        split = float(np.max(np.abs(tube.p[:n, :n] - tube.p_e - tube.p_diff)))
        ok = lp > 0 and le > 0 and ld >= -1e-9 * max(1.0, lp) and split <= 1e-9 * max(1.0, np.abs(tube.p).max())
        return Check("definiteness", ok, min(lp, le), f"lambda_min P={lp:.3g}, P_e={le:.3g}, P_diff={ld:.3g}")

    def mult():
        if tube.m is None or tube.x_mult is None:
            return Check("multiplier", False, float("nan"), "artifact has no multiplier")
        slack = family.min_slack(tube.m, tube.x_mult)
        lx = float(sym_eig(tube.x_mult)[0][0])
        ok = slack >= -1e-8 * scale and lx >= -1e-8 * scale
        return Check("multiplier", ok, slack, "min eigenvalue of M - M_tau(X) over all delays")

    def tight():
        c = tighten_vector(tube.p_e, tube.k, cfg.cons)
        err = float(np.max(np.abs(c - tube.c)))
        return Check("tightening", err <= 1e-8 * max(1.0, float(np.max(c))), err, "max |c - c(P_e)|")

    def exist():
        ok = check_terminal_existence(cfg.cons, tube)
        return Check("terminal_existence", ok, float(ok), "tightened constraints leave room")

    def slacks():
        sl = terminal_slacks(term, sys_, tube, cfg.cons, cfg.q, cfg.r)
        worst = min(sl["invariance_x"], sl["invariance_s"], float(np.min(sl["constraints"])),
                    sl["cost_decrease"])
        tol = 1e-9 * max(1.0, term.s_omega)
        return Check("terminal_analytic", worst >= -tol, worst, "worst-case terminal slack")

    def sampling():
        rep = sample_terminal_conditions(term, sys_, tube, cfg.cons, cfg.q, cfg.r, n=n_samples, seed=seed)
        total = sum(rep["violations"].values())
        detail = ", ".join(f"{k}={v}" for k, v in rep["violations"].items())
        return Check("terminal_sampling", total == 0, float(total), f"violations on {rep['n']} samples: {detail}")

    def oracle():
        h = oracle_horizon
        delays = range(cfg.tau_max + 1)
        if sys_.n_d == 1:
            verts = [np.array([cfg.dist.d_max / np.sqrt(cfg.dist.xi[0, 0])]) * s for s in (-1.0, 1.0)]
        else:
            root = np.linalg.inv(np.linalg.cholesky(cfg.dist.xi)).T
            verts = [cfg.dist.d_max * root[:, i] * s for i in range(sys_.n_d) for s in (-1.0, 1.0)]
        worst = np.inf
        for y_bar in (np.zeros((h, sys_.n_y)), np.vstack([np.ones((1, sys_.n_y)), np.zeros((h - 1, sys_.n_y))])):
            emax = brute_force_worst_error(sys_, tube.k, tube, h, delays, verts, y_bar)
            s = [0.0]
            for k in range(h):
                s.append(tube_predict(s[-1], float(y_bar[k] @ tube.gamma_mat @ y_bar[k]), tube))
            worst = min(worst, min(sk - ek for sk, ek in zip(s, emax)))
        return Check("containment_oracle", worst >= -1e-9, worst,
                     f"min s_k - max ||e_k||^2 over {h}-step enumeration")

    checks = [("design_lmi", lmi), ("definiteness", pos), ("multiplier", mult), ("tightening", tight),
              ("terminal_existence", exist), ("terminal_analytic", slacks),
              ("terminal_sampling", sampling), ("containment_oracle", oracle)]
    return [_guard(name, fn) for name, fn in checks]


# -- commands ------------------------------------------------------------------------

def cmd_synthesize(args) -> int:
    cfg = load_config(args.config)
    try:
        art = synthesize(cfg)
    except DesignInfeasibleError as exc:
        print(f"synthesis failed at stage 'tube design': {exc}", file=sys.stderr)
        return EXIT_SYNTHESIS
    except NoTerminalSetError as exc:
        print(f"synthesis failed at stage 'terminal set': {exc}", file=sys.stderr)
        return EXIT_SYNTHESIS
    save_artifact(art, args.out)
    t, term = art.tube, art.terminal
    np.set_printoptions(precision=4, suppress=True)
    print(f"rho       {t.rho}")
    print(f"K         {t.k.ravel()}")
    print(f"gamma     {t.gamma:g}")
    print(f"c         {t.c}")
    print(f"S         {term.s_mat.tolist()}")
    print(f"x_omega   {term.x_omega:.6g}")
    print(f"s_omega   {term.s_omega:.6g}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _load_pair(args):
    cfg = load_config(args.config)
    art = load_artifact(args.artifact)
    check_compatible(cfg, art)
    return cfg, art


def cmd_simulate(args) -> int:
    cfg, art = _load_pair(args)
    if args.x0 is not None:
        x0 = args.x0
    elif cfg.x0:
        x0 = cfg.x0[0]
    else:
        print("no initial state given (use --x0 or simulation.x0)", file=sys.stderr)
        return EXIT_USAGE
    if x0.size != cfg.sys.n_x:
        print(f"--x0 needs {cfg.sys.n_x} entries", file=sys.stderr)
        return EXIT_USAGE
    steps = cfg.steps if args.steps is None else args.steps
    dseed, wseed = cfg.delay_seed, cfg.disturbance_seed
    if args.seed is not None:
        dseed, wseed = args.seed, args.seed + 1
    trace = run_simulation(cfg, art, x0, steps, dseed, wseed, args.disturbance)
    if args.out:
        export_trace(trace, args.out)
    if trace.aborted:
        print(f"initial state {x0.tolist()} is infeasible: {trace.aborted}", file=sys.stderr)
        return EXIT_INITIAL
    rep = verify_containment(trace, art.tube)
    summary = {
        "steps": len(trace),
        "max_constraint_violation": trace.max_constraint_violation(cfg.cons),
        "min_containment_slack": rep.min_slack if rep.n_checked else None,
        "containment_violations": len(rep.violations),
        "s_T_at_0": float(trace.records[0].s_seq[-1]) if trace.records else None,
        "s_0_at_0": float(trace.records[0].s0) if trace.records else None,
        "final_state_norm": float(np.linalg.norm(trace.states[-1])) if trace.records else None,
        "suboptimal_steps": sum(r.status != "Optimal" for r in trace.records),
    }
    for k, v in summary.items():
        print(f"{k:26s} {v}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg, art = _load_pair(args)
    checks = verify_artifact(cfg, art, n_samples=args.samples, seed=args.seed,
                             oracle_horizon=args.oracle_horizon)
    ok = all(c.passed for c in checks)
    if args.json:
        print(json.dumps({"passed": ok, "checks": [c.as_dict() for c in checks]}, indent=1))
    else:
        for c in checks:
            print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:20s} {c.value: .4g}  {c.detail}")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_export(args) -> int:
    cfg = load_config(args.config)
    if args.kind == "config":
        text = dump_config(cfg)
    else:
        if not args.artifact:
            print("--kind tube needs --artifact", file=sys.stderr)
            return EXIT_USAGE
        art = load_artifact(args.artifact)
        check_compatible(cfg, art)
        d = artifact_to_dict(art)
        text = json.dumps({"tube": d["tube"], "terminal": d["terminal"]}, indent=1)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="iqcmpc", description="Robust tube MPC with IQC-described uncertainty.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synthesize", help="offline tube and terminal design")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="design artifact (JSON)")
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("simulate", help="closed-loop run of the tube MPC")
    s.add_argument("--config", required=True)
    s.add_argument("--artifact", required=True)
    s.add_argument("--x0", type=_vec, help="initial state, comma separated")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int, help="overrides both seeds of the configuration")
    s.add_argument("--disturbance", choices=DisturbancePolicy.KINDS)
    s.add_argument("--out", help="trace CSV")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("verify", help="re-check a design artifact")
    s.add_argument("--config", required=True)
    s.add_argument("--artifact", required=True)
    s.add_argument("--samples", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--oracle-horizon", type=int, default=4)
    s.add_argument("--json", action="store_true", help="machine-readable report")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("export", help="write the normalised configuration or the tube data")
    s.add_argument("--config", required=True)
    s.add_argument("--artifact")
    s.add_argument("--kind", choices=("config", "tube"), default="config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_export)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
