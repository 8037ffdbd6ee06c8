"""Robust tube MPC for linear systems with IQC-described dynamic uncertainty.

Offline, :func:`minimize_tightening` finds the tube shape and constraint
tightening and :func:`terminal_ingredients` the terminal set. Online,
:class:`TubeMPC` solves the tube-size-aware optimal control problem, and
:func:`closed_loop_run` simulates it against the true delayed plant.
"""
from importlib.resources import files

from .config import (Artifact, ConfigError, ProblemConfig, dump_config, load_artifact, load_config,
                     parse_config, save_artifact)
from .iqc import (AugmentedPlant, ConstraintSet, DelayMultiplierFamily, DelayUncertainty,
                  DisturbanceModel, IQCFilter, LinearSystem, Multiplier, assemble_augmented,
                  build_delay_iqc, delay_operator, filter_step)
from .linalg import (Definiteness, NumericalError, definiteness, lqr_gain, schur_reduce,
                     solve_dare, solve_discrete_lyapunov, sym_eig)
from .mpc import MPCConfig, MPCSolution, RecursiveFeasibilityError, TubeMPC, build_ocp, solve_ocp
from .sdp import InfeasibleError, SDPProblem, SDPResult, solve_sdp
from .sim import (DisturbancePolicy, SimTrace, brute_force_worst_error, closed_loop_run,
                  export_trace, nominal_mpc_baseline, read_trace, replay_trace)
from .synthesis import (DesignInfeasibleError, NoTerminalSetError, TerminalSet, TubeParams,
                        check_design_feasibility, minimize_tightening, sample_terminal_conditions,
                        terminal_ingredients)
from .tube import (exact_update, tighten_vector, tube_measurement_update, tube_predict,
                   verify_containment)

__version__ = "0.1.0"


def example_config_path():
    """Path of the bundled delay example configuration."""
    return files(__package__) / "data" / "delay_example.yaml"
