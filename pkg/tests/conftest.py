import numpy as np
import pytest

from iqcmpc import (ConstraintSet, DisturbanceModel, LinearSystem, MPCConfig, build_delay_iqc,
                    load_config, minimize_tightening, terminal_ingredients)
from iqcmpc import example_config_path

A = np.array([[1.05, -0.3], [0.0, 0.95]])
B_U = np.array([[0.0], [1.0]])
B_D = np.array([[1.0], [0.0]])
K = np.array([[0.18, -0.35]])
K_OMEGA = np.array([[0.19, -0.28]])
X0_A = np.array([0.4, 0.2])
X0_B = np.array([0.2, -0.05])

# printed design constants (rounded to one decimal in the source)
P_PRINTED = np.array([[5.9, -8.1, -4.1, -11.7],
                      [-8.1, 15.7, 6.0, 22.2],
                      [-4.2, 6.0, 40.2, -17.0],
                      [-11.7, 22.2, -17.0, 81.7]])
M_PRINTED = np.array([[29.0, 14.5, 0.0], [14.5, 25.4, 0.0], [0.0, 0.0, -20.7]])
S_PRINTED = np.array([[9.2, -5.6], [-5.6, 7.7]])


def delay_plant() -> LinearSystem:
    return LinearSystem(a=A, b_w=B_U, b_d=B_D, b_u=B_U, c=np.zeros((1, 2)), d_w=np.zeros((1, 1)),
                        d_d=np.zeros((1, 1)), d_u=np.ones((1, 1)))


def box_constraints() -> ConstraintSet:
    h = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float)
    return ConstraintSet(h_mat=h, h_vec=np.array([0.4, 0.4, 0.2, 0.2, 0.1, 0.1]))


@pytest.fixture(scope="session")
def plant():
    return delay_plant()


@pytest.fixture(scope="session")
def cons():
    return box_constraints()


@pytest.fixture(scope="session")
def dist():
    return DisturbanceModel(xi=np.eye(1), d_max=0.001)


@pytest.fixture(scope="session")
def delay_iqc():
    return build_delay_iqc(2, 1)


@pytest.fixture(scope="session")
def tube(plant, cons, dist, delay_iqc):
    filt, fam = delay_iqc
    return minimize_tightening(plant, filt, cons, K, 0.95, dist, 244.0, 244.0 * np.eye(1), family=fam)


@pytest.fixture(scope="session")
def terminal(plant, tube, cons):
    return terminal_ingredients(plant, tube, cons, np.eye(2), np.eye(1), K_OMEGA, s_omega=0.1)


@pytest.fixture(scope="session")
def mpc_cfg(plant, cons, tube, terminal):
    return MPCConfig(sys=plant, cons=cons, tube=tube, terminal=terminal, q=np.eye(2), r=np.eye(1),
                     horizon=25)


@pytest.fixture(scope="session")
def example_cfg():
    return load_config(example_config_path())


@pytest.fixture(scope="session")
def acceptance(request):
    """Collects one verdict line per acceptance criterion for the terminal summary."""
    lines = getattr(request.config, "_acceptance_lines", None)
    if lines is None:
        lines = request.config._acceptance_lines = []
    return lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines, key=lambda ln: int(ln.split()[2].rstrip(':'))):
        terminalreporter.write_line(line)
