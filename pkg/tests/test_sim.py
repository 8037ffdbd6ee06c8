import numpy as np
import pytest

from iqcmpc.iqc import DelayUncertainty, DisturbanceModel
from iqcmpc.mpc import TubeMPC
from iqcmpc.sim import (DisturbancePolicy, EnumerationBudgetError, brute_force_worst_error,
                        closed_loop_run, export_trace, nominal_mpc_baseline, plant_step, read_trace,
                        replay_trace, trace_columns)
from iqcmpc.tube import verify_containment

from conftest import K, X0_A, X0_B


class TestPolicy:
    def test_zero(self, dist):
        assert np.array_equal(DisturbancePolicy("zero", dist).draw(), np.zeros(1))

    def test_needs_seed(self, dist):
        with pytest.raises(ValueError):
            DisturbancePolicy("uniform", dist)

    def test_unknown(self, dist):
        with pytest.raises(ValueError):
            DisturbancePolicy("gauss", dist, seed=0)

    def test_vertex_on_boundary(self, dist):
        pol = DisturbancePolicy("vertex", dist, seed=3)
        draws = np.array([pol.draw() for _ in range(200)])
        assert np.allclose(np.abs(draws), dist.d_max, rtol=1e-14)
        assert np.any(draws > 0) and np.any(draws < 0)

    def test_uniform_inside_ellipsoid(self):
        dist = DisturbanceModel(xi=np.diag([4.0, 1.0]), d_max=0.5)
        pol = DisturbancePolicy("uniform", dist, seed=1)
        draws = np.array([pol.draw() for _ in range(2000)])
        q = np.einsum("ni,ij,nj->n", draws, dist.xi, draws)
        assert np.all(q <= dist.d_max ** 2 * (1 + 1e-12))
        # uniform in the area: half the mass beyond radius 1/sqrt(2)
        assert np.mean(q > dist.d_max ** 2 / 2) == pytest.approx(0.5, abs=0.05)

    def test_reset_repeats(self, dist):
        pol = DisturbancePolicy("uniform", dist, seed=5)
        a = [pol.draw() for _ in range(5)]
        pol.reset()
        assert np.array_equal(a, [pol.draw() for _ in range(5)])


class TestPlantStep:
    def test_no_delay(self, plant):
        x = np.array([0.1, 0.2])
        xn, y, w = plant_step(plant, x, np.array([0.05]), np.array([0.001]), 0, [], 2)
        assert np.allclose(w, 0.0)
        assert np.allclose(xn, plant.a @ x + plant.b_u @ [0.05] + plant.b_d @ [0.001])

    def test_delayed_input(self, plant):
        """With y = u the delayed channel replaces the current input by one from tau samples ago."""
        hist = [np.array([0.07]), np.array([-0.02])]
        x = np.array([0.1, 0.2])
        xn, y, w = plant_step(plant, x, np.array([0.05]), np.zeros(1), 2, hist, 2)
        assert np.allclose(w, 0.07 - 0.05)
        assert np.allclose(xn, plant.a @ x + plant.b_u @ [0.07])

    def test_zero_history_before_start(self, plant):
        xn, y, w = plant_step(plant, np.zeros(2), np.array([0.05]), np.zeros(1), 1, [], 2)
        assert np.allclose(w, -0.05)
        assert np.allclose(xn, 0.0)


class TestClosedLoop:
    def test_trivial_run(self, plant, mpc_cfg, dist):
        tr = closed_loop_run(plant, DelayUncertainty(2, seed=0), TubeMPC(mpc_cfg), np.zeros(2), 5,
                             DisturbancePolicy("zero", dist))
        assert len(tr) == 5
        assert np.allclose(tr.states, 0.0, atol=1e-7)
        assert tr.max_constraint_violation(mpc_cfg.cons) < 0

    def test_empty_run(self, plant, mpc_cfg, dist):
        tr = closed_loop_run(plant, DelayUncertainty(2, seed=0), TubeMPC(mpc_cfg), X0_A, 0,
                             DisturbancePolicy("zero", dist))
        assert len(tr) == 0 and tr.max_constraint_violation(mpc_cfg.cons) == -np.inf

    def test_negative_steps(self, plant, mpc_cfg, dist):
        with pytest.raises(ValueError):
            closed_loop_run(plant, DelayUncertainty(2, seed=0), TubeMPC(mpc_cfg), X0_A, -1,
                            DisturbancePolicy("zero", dist))

    def test_infeasible_start_aborts(self, plant, mpc_cfg, dist):
        tr = closed_loop_run(plant, DelayUncertainty(2, seed=0), TubeMPC(mpc_cfg), [10.0, 10.0], 5,
                             DisturbancePolicy("zero", dist))
        assert tr.aborted == "infeasible at t=0" and len(tr) == 0

    def test_deterministic(self, plant, mpc_cfg, dist, delay_iqc):
        runs = [closed_loop_run(plant, DelayUncertainty(2, seed=4), TubeMPC(mpc_cfg), X0_B, 12,
                                DisturbancePolicy("uniform", dist, seed=9), filt=delay_iqc[0])
                for _ in range(2)]
        assert np.array_equal(runs[0].states, runs[1].states)
        assert [r.tau for r in runs[0].records] == [r.tau for r in runs[1].records]

    def test_short_run_contained(self, plant, mpc_cfg, dist, delay_iqc):
        tr = closed_loop_run(plant, DelayUncertainty(2, seed=1), TubeMPC(mpc_cfg), X0_A, 15,
                             DisturbancePolicy("vertex", dist, seed=2), filt=delay_iqc[0])
        assert tr.aborted is None
        assert tr.max_constraint_violation(mpc_cfg.cons) <= 1e-9
        rep = verify_containment(tr, mpc_cfg.tube)
        assert rep.ok and rep.n_checked > len(tr)


class TestTraceFiles:
    def test_columns(self):
        assert trace_columns(2) == ["t", "x1", "x2", "u", "d", "tau", "w", "s0", "z01", "z02", "v0",
                                    "status", "cost"]

    def test_round_trip(self, plant, mpc_cfg, dist, tmp_path):
        tr = closed_loop_run(plant, DelayUncertainty(2, seed=1), TubeMPC(mpc_cfg), X0_B, 10,
                             DisturbancePolicy("uniform", dist, seed=2))
        path = tmp_path / "trace.csv"
        export_trace(tr, path)
        tab = read_trace(path)
        assert len(tab["t"]) == 10
        assert np.array_equal(np.column_stack([tab["x1"], tab["x2"]]), tr.states[:10])
        assert tab["tau"] == [r.tau for r in tr.records]
        assert replay_trace(tab, plant, 2) == 0.0

    def test_replay_detects_tampering(self, plant, mpc_cfg, dist, tmp_path):
        tr = closed_loop_run(plant, DelayUncertainty(2, seed=1), TubeMPC(mpc_cfg), X0_B, 6,
                             DisturbancePolicy("uniform", dist, seed=2))
        path = tmp_path / "trace.csv"
        export_trace(tr, path)
        tab = read_trace(path)
        tab["tau"][2] = (tab["tau"][2] + 1) % 3
        assert replay_trace(tab, plant, 2) > 1e-6

    def test_header_only(self, plant, mpc_cfg, dist, tmp_path):
        tr = closed_loop_run(plant, DelayUncertainty(2, seed=0), TubeMPC(mpc_cfg), X0_A, 0,
                             DisturbancePolicy("zero", dist))
        path = tmp_path / "empty.csv"
        export_trace(tr, path)
        assert path.read_text().strip() == ",".join(trace_columns(2))
        assert all(v == [] for v in read_trace(path).values())


class TestBruteForce:
    def test_one_step_closed_form(self, plant, tube):
        out = brute_force_worst_error(plant, K, tube, 1, [0, 1, 2], [[-0.001], [0.001]], np.zeros((1, 1)))
        bd = plant.b_d[:, 0] * 0.001
        assert out[0] == 0.0
        assert out[1] == pytest.approx(bd @ tube.p_e @ bd, rel=1e-14)

    def test_silent(self, plant, tube):
        out = brute_force_worst_error(plant, K, tube, 4, [0, 1, 2], [[0.0]], np.zeros((4, 1)))
        assert np.all(out == 0.0)

    def test_budget(self, plant, tube):
        with pytest.raises(EnumerationBudgetError):
            brute_force_worst_error(plant, K, tube, 8, [0, 1, 2], [[-0.001], [0.001]],
                                    np.zeros((8, 1)), budget=1000)

    def test_below_tube(self, plant, tube):
        """A constant excitation never pushes the worst error past the predicted tube."""
        h = 4
        y = np.full((h, 1), 0.05)
        out = brute_force_worst_error(plant, K, tube, h, [0, 1, 2], [[-0.001], [0.001]], y)
        s = 0.0
        for k in range(h):
            s = tube.rho ** 2 * s + tube.gamma * tube.d_max ** 2 + tube.gamma * 0.05 ** 2
            assert out[k + 1] <= s


class TestBaseline:
    def test_without_delay_converges(self, plant, cons):
        tr = nominal_mpc_baseline(plant, cons, np.eye(2), np.eye(1), 25, X0_A,
                                  DelayUncertainty.constant(2, 0), 60)
        assert tr.aborted is None
        assert np.linalg.norm(tr.x_final) < 1e-3
        assert tr.max_constraint_violation(cons) <= 1e-7

    def test_origin_stays(self, plant, cons):
        tr = nominal_mpc_baseline(plant, cons, np.eye(2), np.eye(1), 10, np.zeros(2),
                                  DelayUncertainty.constant(2, 2), 10)
        assert np.allclose(tr.states, 0.0, atol=1e-8)
