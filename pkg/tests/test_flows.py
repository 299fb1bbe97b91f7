import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from flowbridge.errors import DimensionError, DomainError, IntegrationDivergedError
from flowbridge.flows import (
    EuclideanFlowConfig,
    Trajectory,
    TorusFlowConfig,
    euclid_path_sample,
    euclid_target_field,
    integrate_ode,
    integrate_sde,
    sigma_tot,
    time_grid,
    torus_path,
    torus_target_field,
)
from flowbridge.geometry import kappa, torus_distance, torus_log

on_torus = st.floats(-np.pi, np.pi, exclude_max=True)
unit = st.floats(0.0, 1.0)


class TestEuclidean:
    def test_boundaries(self):
        x0, x1 = np.array([1.0, -2.0, 0.5]), np.array([0.0, 3.0, 4.0])
        assert np.array_equal(euclid_path_sample(x0, x1, 0.0), x0)
        assert np.array_equal(euclid_path_sample(x0, x1, 1.0), x1)

    def test_monte_carlo_mean(self):
        rng = np.random.default_rng(0)
        x0, x1 = np.array([0.0, 2.0]), np.array([4.0, -2.0])
        draws = euclid_path_sample(np.tile(x0, (100_000, 1)), np.tile(x1, (100_000, 1)), 0.5, 0.1, rng)
        assert np.all(np.abs(draws.mean(0) - (x0 + x1) / 2) < 3 * 0.1 / np.sqrt(1e5))
        assert draws.std(0) == pytest.approx([0.1, 0.1], rel=0.02)

    def test_target_field(self):
        assert np.array_equal(euclid_target_field(np.ones(3), np.ones(3)), np.zeros(3))
        assert np.array_equal(euclid_target_field(np.zeros(3), np.eye(3)[0]), np.eye(3)[0])

    @given(unit.filter(lambda t: t < 0.999))
    def test_field_consistent_with_path(self, t):
        x0, x1 = np.array([0.3, -1.0, 2.0]), np.array([1.5, 0.2, -0.7])
        xt = euclid_path_sample(x0, x1, t)
        assert np.allclose((x1 - xt) / (1 - t), euclid_target_field(x0, x1), atol=1e-9)

    def test_errors(self):
        with pytest.raises(DimensionError):
            euclid_target_field(np.zeros(2), np.zeros(3))
        with pytest.raises(DomainError):
            euclid_path_sample(np.zeros(2), np.zeros(2), 1.5)
        with pytest.raises(DomainError):
            EuclideanFlowConfig(sigma=-1.0)
        with pytest.raises(DomainError):
            TorusFlowConfig(k=0)

    def test_integrated_constant_field_hits_target(self):
        rng = np.random.default_rng(1)
        x0, x1 = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        traj = integrate_ode(x0, lambda x, t: x1 - x0, 500)
        assert np.max(np.abs(traj.final - x1)) < 1e-9
        assert traj.times[0] == 0.0 and traj.times[-1] == 1.0
        assert len(traj.states) == len(traj.times)


class TestTorus:
    def test_boundaries(self):
        assert torus_path(0.4, -2.0, 0.0) == pytest.approx(0.4)
        assert torus_path(0.4, -2.0, 1.0) == pytest.approx(-2.0, abs=1e-12)

    def test_half_way_example(self):
        assert torus_path(0.0, np.pi / 2, 0.5, 3) == pytest.approx(0.875 * np.pi / 2, abs=1e-15)

    def test_contraction_10k(self):
        rng = np.random.default_rng(2)
        x0, x1 = rng.uniform(-np.pi, np.pi, (2, 10_000))
        t = rng.uniform(0, 1, 10_000)
        xt = torus_path(x0, x1, t)
        err = torus_distance(xt, x1) - kappa(t) * torus_distance(x0, x1)
        assert np.max(np.abs(err)) < 1e-12
        assert np.all((xt >= -np.pi) & (xt < np.pi))

    def test_field_matches_numeric_derivative(self):
        rng = np.random.default_rng(3)
        h = 1e-5
        x0, x1 = rng.uniform(-np.pi, np.pi, (2, 2000))
        t = rng.uniform(h, 1 - h, 2000)
        fd = torus_log(torus_path(x0, x1, t - h), torus_path(x0, x1, t + h)) / (2 * h)
        assert np.max(np.abs(fd - torus_target_field(x0, x1, t))) < 1e-6

    @given(on_torus, unit)
    def test_zero_field_when_endpoints_agree(self, x, t):
        assert torus_target_field(x, x, t) == 0.0

    def test_zero_at_end(self):
        assert torus_target_field(0.2, 1.7, 1.0, 3) == 0.0

    def test_scheduler_weight_integrates_to_one(self):
        val, _ = quad(lambda t: 3 * (1 - t) ** 2, 0, 1)
        assert val == pytest.approx(1.0, abs=1e-12)
        x0, x1 = 2.9, -2.8
        disp, _ = quad(lambda t: torus_target_field(x0, x1, t), 0, 1)
        assert disp == pytest.approx(torus_log(x0, x1), abs=1e-10)

    def test_euler_reaches_endpoint(self):
        rng = np.random.default_rng(4)
        x0, x1 = rng.uniform(-np.pi, np.pi, (2, 1000))
        traj = integrate_ode(x0, lambda x, t: torus_target_field(x0, x1, t), 500, torus_mask=True)
        assert np.max(torus_distance(traj.final, x1)) < 0.01
        assert all(np.all((s >= -np.pi) & (s < np.pi)) for s in traj.states)


class TestIntegration:
    def test_zero_field(self):
        x0 = np.array([1.0, 2.0])
        assert np.array_equal(integrate_ode(x0, lambda x, t: np.zeros(2), 10).final, x0)

    def test_divergence(self):
        with pytest.raises(IntegrationDivergedError):
            integrate_ode(np.ones(2), lambda x, t: np.array([np.inf, 0.0]), 5)

    def test_bad_steps(self):
        with pytest.raises(DomainError):
            integrate_ode(np.ones(2), lambda x, t: x, 0)
        with pytest.raises(DomainError):
            time_grid(0)

    def test_variance_recorded_on_closed_grid(self):
        traj = integrate_ode(np.zeros(1), lambda x, t: (np.zeros(1), np.full(1, t)), 20)
        assert len(traj.per_step_variance) == 21
        assert traj.per_step_variance[-1][0] == 1.0


class TestSigmaTot:
    def test_constant_variance(self):
        traj = integrate_ode(np.zeros(3), lambda x, t: (np.zeros(3), np.full(3, 0.49)), 50)
        assert np.allclose(sigma_tot(traj), 0.7, atol=1e-12)

    def test_linear_variance(self):
        traj = integrate_ode(np.zeros(1), lambda x, t: (np.zeros(1), np.array([t])), 500)
        assert sigma_tot(traj) == pytest.approx(np.sqrt(0.5), abs=1e-4)

    def test_zero(self):
        traj = integrate_ode(np.zeros(2), lambda x, t: (np.zeros(2), np.zeros(2)), 5)
        assert np.all(sigma_tot(traj) == 0.0)

    def test_empty_record(self):
        with pytest.raises(ValueError):
            sigma_tot(Trajectory(times=time_grid(3)))


def test_sde_endpoint_spread_matches_integrated_variance():
    rng = np.random.default_rng(5)
    x0 = np.zeros(20_000)
    traj = integrate_sde(x0, lambda x, t: (np.zeros_like(x), np.full_like(x, 0.25 + t)), 100, rng)
    expected = sigma_tot(traj)
    assert np.std(traj.final) == pytest.approx(float(np.mean(expected)), rel=0.03)
