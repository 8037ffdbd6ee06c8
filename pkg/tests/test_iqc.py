import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iqcmpc.iqc import (ConstraintSet, DelayUncertainty, DisturbanceModel, IQCFilter, LinearSystem,
                        Multiplier, assemble_augmented, build_delay_iqc, delay_operator, filter_step)

from conftest import A, B_U, K, delay_plant


def static_filter(d1, d2):
    d1 = np.atleast_2d(d1)
    d2 = np.atleast_2d(d2)
    return IQCFilter(a_psi=np.zeros((0, 0)), b_psi1=np.zeros((0, d1.shape[1])),
                     b_psi2=np.zeros((0, d2.shape[1])), c_psi=np.zeros((d1.shape[0], 0)),
                     d_psi1=d1, d_psi2=d2)


class TestDataModel:
    def test_dimension_check(self):
        with pytest.raises(ValueError):
            LinearSystem(a=A, b_w=np.zeros((3, 1)), b_d=B_U, b_u=B_U, c=np.zeros((1, 2)),
                         d_w=np.zeros((1, 1)), d_d=np.zeros((1, 1)), d_u=np.ones((1, 1)))

    def test_plant_step(self):
        sys = delay_plant()
        x1, y = sys.step(np.array([1.0, 2.0]), np.array([0.5]), np.array([0.1]), np.array([0.2]))
        assert np.allclose(x1, A @ [1.0, 2.0] + [0.2, 0.6])
        assert np.allclose(y, [0.5])

    def test_disturbance_needs_posdef(self):
        with pytest.raises(ValueError):
            DisturbanceModel(xi=np.array([[0.0]]), d_max=1.0)
        with pytest.raises(ValueError):
            DisturbanceModel(xi=np.eye(1), d_max=-1.0)

    def test_empty_constraints(self):
        with pytest.raises(ValueError):
            ConstraintSet(h_mat=np.zeros((0, 3)), h_vec=np.zeros(0))

    def test_constraint_violation(self):
        cs = ConstraintSet(h_mat=[[1.0, 0.0, 0.0]], h_vec=[0.4])
        assert np.allclose(cs.violation([0.5, 0.0], [0.0]), [0.1])

    def test_multiplier_symmetric(self):
        with pytest.raises(ValueError):
            Multiplier(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_filter_initial_state(self):
        filt, _ = build_delay_iqc(2, 1)
        assert np.array_equal(filt.initial_state(), np.zeros(2))


class TestDelayFilter:
    def test_matrices(self):
        filt, fam = build_delay_iqc(2, 1)
        assert np.array_equal(filt.a_psi, [[0, 1], [0, 0]])
        assert np.array_equal(filt.b_psi1, [[0], [1]])
        assert np.array_equal(filt.b_psi2, np.zeros((2, 1)))
        assert np.array_equal(filt.c_psi, [[1, -1], [0, 1], [0, 0]])
        assert np.array_equal(filt.d_psi1, [[0], [-1], [0]])
        assert np.array_equal(filt.d_psi2, [[0], [0], [1]])
        assert (filt.n_psi, filt.n_z) == (2, 3)

    def test_dimensions_multi_output(self):
        filt, fam = build_delay_iqc(3, 2)
        assert (filt.n_psi, filt.n_z) == (6, 8)
        assert fam.m_tau(3, np.eye(2)).shape == (8, 8)

    def test_zero_delay_member(self):
        _, fam = build_delay_iqc(2, 1)
        assert np.array_equal(fam.m_tau(0, [[3.0]]), np.diag([0.0, 0.0, -3.0]))

    def test_full_delay_member(self):
        _, fam = build_delay_iqc(2, 1)
        assert np.array_equal(fam.m_tau(2, [[1.0]]), [[1, 1, 0], [1, 1, 0], [0, 0, -1]])
        assert np.array_equal(fam.m_tau(1, [[1.0]]), np.diag([0.0, 1.0, -1.0]))

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            build_delay_iqc(0, 1)
        _, fam = build_delay_iqc(2, 1)
        with pytest.raises(ValueError):
            fam.m_tau(3, [[1.0]])

    def test_filter_step_substitution(self):
        filt, _ = build_delay_iqc(2, 1)
        psi_next, z = filter_step(filt, [5.0, 7.0], [11.0], [13.0])
        assert np.array_equal(psi_next, [7.0, 11.0])
        assert np.array_equal(z, [5.0 - 7.0, 7.0 - 11.0, 13.0])

    def test_filter_step_zero(self):
        filt, _ = build_delay_iqc(2, 1)
        psi, z = filter_step(filt, np.zeros(2), [0.0], [0.0])
        assert not psi.any() and not z.any()

    def test_static_filter(self):
        filt = static_filter([[2.0]], [[3.0]])
        psi, z = filter_step(filt, np.zeros(0), [1.0], [1.0])
        assert psi.size == 0 and np.allclose(z, [5.0])

    def test_filter_dimension_error(self):
        filt, _ = build_delay_iqc(2, 1)
        with pytest.raises(ValueError):
            filter_step(filt, np.zeros(3), [0.0], [0.0])

    @settings(max_examples=80, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 2), st.integers(0, 2**31 - 1), st.integers(1, 15))
    def test_quadratic_identity(self, tau_max, n_y, seed, n):
        """||z_t||^2_{M_tau_t(X)} vanishes along any trajectory of the delay operator."""
        rng = np.random.default_rng(seed)
        filt, fam = build_delay_iqc(tau_max, n_y)
        g = rng.standard_normal((n_y, n_y))
        x = g @ g.T
        psi = filt.initial_state()
        hist = []
        for t in range(n):
            y = rng.standard_normal(n_y)
            hist.append(y)
            tau = int(rng.integers(0, tau_max + 1))
            w = delay_operator(hist, tau, tau_max)
            psi, z = filter_step(filt, psi, y, w)
            val = z @ fam.m_tau(tau, x) @ z
            assert abs(val) <= 1e-12 * max(1.0, np.abs(x).max() * (z @ z))

    def test_hard_iqc_sums(self, tube):
        """Weighted partial sums stay nonnegative for a multiplier dominating every member."""
        filt, fam = build_delay_iqc(2, 1)
        assert fam.min_slack(tube.m, tube.x_mult) >= -1e-7
        rng = np.random.default_rng(7)
        for _ in range(50):
            psi = filt.initial_state()
            hist = []
            total = 0.0
            for t in range(30):
                y = rng.standard_normal(1)
                hist.append(y)
                w = delay_operator(hist, int(rng.integers(0, 3)), 2)
                psi, z = filter_step(filt, psi, y, w)
                total += 0.95 ** (-2 * t) * (z @ tube.m @ z)
                assert total >= -1e-6 * 0.95 ** (-2 * t)


class TestDelayOperator:
    def test_zero_delay(self):
        assert np.array_equal(delay_operator([[1.0], [3.0]], 0), [0.0])

    def test_constant_history(self):
        hist = [np.array([2.5])] * 4
        for tau in range(3):
            assert np.array_equal(delay_operator(hist, tau, 2), [0.0])

    def test_example(self):
        assert np.array_equal(delay_operator([[1.0], [3.0]], 1, 2), [-2.0])

    def test_zero_padding(self):
        assert np.array_equal(delay_operator([[3.0]], 2, 2), [-3.0])

    def test_range(self):
        with pytest.raises(ValueError):
            delay_operator([[1.0]], 3, 2)
        with pytest.raises(ValueError):
            delay_operator([[1.0]], -1)


class TestDelayUncertainty:
    def test_seed_mandatory(self):
        with pytest.raises(ValueError):
            DelayUncertainty(2)

    def test_schedule_range(self):
        with pytest.raises(ValueError):
            DelayUncertainty(2, schedule=[0, 3])

    def test_deterministic(self):
        a = DelayUncertainty(2, seed=5).sequence(100)
        b = DelayUncertainty(2, seed=5).sequence(100)
        assert np.array_equal(a, b)
        assert set(a) <= {0, 1, 2}

    def test_constant(self):
        assert np.array_equal(DelayUncertainty.constant(2, 2).sequence(5), [2] * 5)

    def test_schedule_repeats_last(self):
        u = DelayUncertainty(2, schedule=[0, 1])
        assert [u.draw(t) for t in range(4)] == [0, 1, 1, 1]


class TestAugmented:
    def test_delay_example_structure(self):
        filt, _ = build_delay_iqc(2, 1)
        sys = delay_plant()
        aug = assemble_augmented(sys, K, filt)
        a_k = A + B_U @ K
        assert aug.a_tilde.shape == (4, 4)
        assert np.array_equal(aug.a_tilde[:2, 2:], np.zeros((2, 2)))
        assert np.array_equal(aug.a_tilde[:2, :2], a_k)
        assert np.array_equal(aug.a_tilde[2:, :2], filt.b_psi1 @ K)
        assert np.array_equal(aug.a_tilde[2:, 2:], filt.a_psi)
        assert np.array_equal(aug.b_tilde, np.vstack([B_U, filt.b_psi2]))
        assert np.array_equal(aug.c_tilde, np.hstack([filt.d_psi1 @ K, filt.c_psi]))
        assert np.array_equal(aug.d_tilde, filt.d_psi2)

    def test_static_filter(self):
        sys = delay_plant()
        filt = static_filter([[1.0], [2.0]], [[0.0], [1.0]])
        aug = assemble_augmented(sys, K, filt)
        assert np.array_equal(aug.a_tilde, A + B_U @ K)
        assert np.allclose(aug.c_tilde, filt.d_psi1 @ (sys.c + sys.d_u @ K))

    def test_zero_gain_no_feedthrough(self):
        c = np.array([[1.0, -2.0]])
        sys = LinearSystem(a=A, b_w=B_U, b_d=B_U, b_u=B_U, c=c, d_w=np.zeros((1, 1)),
                           d_d=np.zeros((1, 1)), d_u=np.zeros((1, 1)))
        filt, _ = build_delay_iqc(2, 1)
        aug = assemble_augmented(sys, np.zeros((1, 2)), filt)
        assert np.array_equal(aug.c_tilde[:, :2], filt.d_psi1 @ c)

    def test_linear_in_c(self):
        filt, _ = build_delay_iqc(2, 1)
        rng = np.random.default_rng(1)
        c1, c2 = rng.standard_normal((2, 1, 2))
        mk = lambda c: LinearSystem(a=A, b_w=B_U, b_d=B_U, b_u=B_U, c=c, d_w=np.zeros((1, 1)),
                                    d_d=np.zeros((1, 1)), d_u=np.zeros((1, 1)))
        z = np.zeros((1, 2))
        t1 = assemble_augmented(mk(c1), z, filt).c_tilde
        t2 = assemble_augmented(mk(c2), z, filt).c_tilde
        t12 = assemble_augmented(mk(c1 + 2 * c2), z, filt).c_tilde
        # the error block is linear in C, the filter block does not depend on it
        assert np.allclose(t12[:, :2], t1[:, :2] + 2 * t2[:, :2])
        assert np.array_equal(t12[:, 2:], filt.c_psi)

    def test_gain_shape(self):
        filt, _ = build_delay_iqc(2, 1)
        with pytest.raises(ValueError):
            assemble_augmented(delay_plant(), np.zeros((2, 2)), filt)
