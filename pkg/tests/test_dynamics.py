import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from tled.dynamics import (
    DRParams, LinearModel, Loading, PrescribedDisplacement, SolverState, critical_time_step,
    dynamic_relaxation_solve, explicit_step, ramp_factor, spring_chain, stable_time_step, time_accurate_solve,
)
from tled.errors import ElementInversionError, InstabilityError
from tled.fem import FEMModel
from tled.generators import box_hex_mesh
from tled.materials import NEO_HOOKEAN, MaterialParams
from tled.scenarios import spring_chain_error


def hex_model(size=1.0, E=3000.0):
    return FEMModel(box_hex_mesh((1, 1, 1), (size,) * 3), MaterialParams(NEO_HOOKEAN, E, 0.49))


def single_spring(k=4.0, m=1.0):
    return LinearModel(k * np.eye(3), [m])


class TestRamp:
    def test_end_points(self):
        assert ramp_factor(0.0, 2.0) == 0.0
        assert ramp_factor(2.0, 2.0) == 1.0 and ramp_factor(5.0, 2.0) == 1.0
        assert ramp_factor(1.0, 2.0) == 0.5

    @pytest.mark.parametrize("t", [0.0, 2.0])
    def test_flat_ends(self, t):
        h = 1e-5
        slope = (ramp_factor(t + h, 2.0) - ramp_factor(t - h, 2.0)) / (2 * h)
        curv = (ramp_factor(t + h, 2.0) - 2 * ramp_factor(t, 2.0) + ramp_factor(t - h, 2.0)) / h ** 2
        assert abs(slope) <= 1e-8 and abs(curv) <= 1e-4

    def test_bad_duration(self):
        with pytest.raises(ValueError):
            ramp_factor(0.1, 0.0)

    @given(a=st.floats(-1, 3), b=st.floats(-1, 3))
    def test_monotone_and_bounded(self, a, b):
        lo, hi = sorted((a, b))
        assert 0.0 <= ramp_factor(lo, 2.0) <= ramp_factor(hi, 2.0) <= 1.0


class TestTimeStep:
    def test_unit_hex(self):
        assert_allclose(critical_time_step(hex_model()), 1 / np.sqrt(51342.28187919459 / 1000), rtol=1e-12)
        assert_allclose(critical_time_step(hex_model()), 0.1396, atol=5e-5)

    def test_scales_with_length(self):
        assert_allclose(critical_time_step(hex_model(2.0)), 2 * critical_time_step(hex_model()), rtol=1e-12)

    def test_scales_with_stiffness(self):
        assert_allclose(critical_time_step(hex_model(E=3e5)), critical_time_step(hex_model()) / 10, rtol=1e-12)

    def test_stable_step_on_unit_hex(self):
        # lumped-mass single-point unit hex: the dilatation mode has omega^2 = 12 kappa / rho
        params = MaterialParams(NEO_HOOKEAN, 3000.0, 0.49)
        assert_allclose(stable_time_step(hex_model()), 2 / np.sqrt(12 * params.kappa / 1000.0), rtol=1e-6)
        assert stable_time_step(hex_model()) < critical_time_step(hex_model())

    def test_stability_bracket(self):
        model = hex_model()
        dt = stable_time_step(model)
        u0 = 0.01 * np.random.default_rng(0).normal(size=(8, 3))
        traj = time_accurate_solve(model, None, 1e4 * 0.9 * dt, dt=0.9 * dt, u0=u0)
        assert traj.steps >= 10_000
        assert np.abs(traj.displacements).max() < 0.1
        with pytest.raises((InstabilityError, ElementInversionError)):
            time_accurate_solve(model, None, 1e4 * 1.5 * dt, dt=1.5 * dt, u0=u0)


class TestExplicitStep:
    def test_rest_stays_at_rest(self):
        s = SolverState.at_rest(4, np.ones(4), 0.1)
        nxt = explicit_step(s, np.zeros((4, 3)), np.zeros((4, 3)))
        assert not nxt.u.any() and nxt.t == pytest.approx(0.1) and nxt.step == 1

    def test_uniform_acceleration(self):
        F, m = np.array([[2.0, -1.0, 0.5]]), 4.0
        for dt in (0.1, 0.05):
            s = SolverState.start([m], dt, np.zeros((1, 3)), np.zeros((1, 3)), F / m)
            for _ in range(int(round(1.0 / dt))):
                s = explicit_step(s, np.zeros((1, 3)), F)
            assert_allclose(s.u, 0.5 * F / m * s.t ** 2, rtol=1e-12)

    def test_harmonic_period(self):
        k, m = 4.0, 1.0
        model = single_spring(k, m)
        dt = critical_time_step(model) / 20
        period = 2 * np.pi * np.sqrt(m / k)
        traj = time_accurate_solve(model, None, 10 * period, snapshot_times=np.arange(0, 10 * period, dt),
                                   dt=dt, u0=[[1.0, 0, 0]])
        x = traj.displacements[:, 0, 0]
        up = np.nonzero((x[:-1] < 0) & (x[1:] >= 0))[0]
        t_cross = traj.times[up] - x[up + 1] * dt / (x[up + 1] - x[up])
        assert_allclose(np.diff(t_cross).mean(), period, rtol=1e-2)

    def test_prescribed_nodes_overwritten(self):
        pd = PrescribedDisplacement([0], [1.0, 2.0, 3.0], ramp_duration=1.0)
        s = SolverState.at_rest(2, np.ones(2), 0.1)
        for _ in range(15):
            s = explicit_step(s, np.zeros((2, 3)), np.ones((2, 3)), [pd])
            assert np.array_equal(s.u[0], ramp_factor(s.t, 1.0) * np.array([1.0, 2.0, 3.0]))

    def test_divergence_detected(self):
        s = SolverState.at_rest(1, np.ones(1), 1.0)
        with pytest.raises(InstabilityError):
            explicit_step(s, np.zeros((1, 3)), np.full((1, 3), 1e6), diameter=1.0)


class TestDynamicRelaxation:
    def test_zero_load(self):
        res = dynamic_relaxation_solve(spring_chain(10))
        assert res.report.converged and res.report.iterations == 10
        assert not res.u.any()

    def test_spring_chain(self):
        assert spring_chain_error(10) <= 1e-8

    def test_iteration_cap(self):
        chain = spring_chain(10)
        f = np.zeros((11, 3))
        f[-1, 0] = 1.0
        ld = Loading([PrescribedDisplacement([0], [0.0, 0.0, 0.0])], forces=f)
        res = dynamic_relaxation_solve(chain, ld, DRParams(max_iterations=20))
        assert not res.report.converged and res.report.iterations == 20

    @pytest.fixture(scope="class")
    @classmethod
    def cube_compression(cls):
        mesh = box_hex_mesh((4, 4, 4))
        model = FEMModel(mesh, MaterialParams(NEO_HOOKEAN, 3000.0, 0.49))
        ld = Loading([PrescribedDisplacement(mesh.node_sets["zmin"], [0.0, 0.0, 0.0], 0.5),
                      PrescribedDisplacement(mesh.node_sets["zmax"], [0.0, 0.0, -0.1], 0.5)])
        return model, ld

    def test_cube_matches_tighter_solve(self, cube_compression):
        model, ld = cube_compression
        coarse = dynamic_relaxation_solve(model, ld)
        fine = dynamic_relaxation_solve(model, ld, DRParams(tolerance=1e-6 * model.diameter))
        assert coarse.report.converged and fine.report.converged
        scale = np.linalg.norm(fine.u, axis=1).max()
        assert np.linalg.norm(coarse.u - fine.u, axis=1).max() <= 5e-3 * scale

    def test_increments_settle_monotonically(self, cube_compression):
        model, ld = cube_compression
        res = dynamic_relaxation_solve(model, ld, DRParams(tolerance=1e-7 * model.diameter))
        steps_to_load = int(np.ceil(ld.ramp_duration / res.report.dt))
        inc = np.array(res.report.increment_history[steps_to_load:])
        peaks = inc[: len(inc) // 50 * 50].reshape(-1, 50).max(axis=1)
        settled = peaks[len(peaks) // 4:]
        assert np.all(np.diff(settled) <= 0), settled

    def test_repeatable(self, cube_compression):
        model, ld = cube_compression
        a = dynamic_relaxation_solve(model, ld)
        b = dynamic_relaxation_solve(model, ld)
        assert a.u.tobytes() == b.u.tobytes()


class TestTimeAccurate:
    def test_zero_loading(self):
        traj = time_accurate_solve(hex_model(), None, 1.0, snapshot_times=[0.2, 0.5, 1.0])
        assert traj.displacements.shape == (3, 8, 3) and not traj.displacements.any()

    def test_energy_conserved(self):
        model = hex_model()
        u0 = 1e-3 * np.random.default_rng(0).normal(size=(8, 3))
        omega2 = model.energy(u0) * 2 / np.sum(model.mass[:, None] * u0 ** 2)
        dt = critical_time_step(model) / 20
        traj = time_accurate_solve(model, None, 100 * 2 * np.pi / np.sqrt(omega2), dt=dt, u0=u0,
                                   track_energy=True)
        E = traj.kinetic_energy + traj.strain_energy
        assert np.abs(E - E[0]).max() <= 1e-2 * E[0]

    def test_bit_identical(self):
        model = hex_model()
        u0 = 1e-3 * np.random.default_rng(1).normal(size=(8, 3))
        a = time_accurate_solve(model, None, 5.0, snapshot_times=[1.0, 5.0], u0=u0)
        b = time_accurate_solve(model, None, 5.0, snapshot_times=[1.0, 5.0], u0=u0)
        assert a.displacements.tobytes() == b.displacements.tobytes()
