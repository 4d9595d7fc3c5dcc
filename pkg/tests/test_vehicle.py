"""Tests for the single-track dynamics core."""

import numpy as np
import pytest
from scipy.linalg import expm

from driftsim.vehicle import (BodyState, ControlInput, SingularStateError,
                              TireParams, VehicleParams, body_rates,
                              integrate_rk4, nominal_derivatives, slip_angles,
                              tire_lateral_force)

PARAMS = VehicleParams(m=1835.0, I_z=3234.0, a=1.4, b=1.65, mu=1.0)
TIRES = TireParams(B=10.92, C=1.458)


class TestSlipAngles:
    def test_zero_motion(self):
        af, ar = slip_angles(10.0, 0.0, 0.0, 0.0, PARAMS)
        assert af == 0.0 and ar == 0.0

    def test_pure_steering_offset(self):
        af, ar = slip_angles(10.0, 0.0, 0.0, 0.1, PARAMS)
        assert af == pytest.approx(-0.1, abs=1e-15)
        assert ar == 0.0

    def test_formula_oracle(self):
        # frozen from an independent evaluation of the slip-angle formulas
        af, ar = slip_angles(10.0, 0.2, 0.5, 0.05, PARAMS)
        assert af == pytest.approx(0.217560691280635, abs=1e-12)
        assert ar == pytest.approx(0.117981594470740, abs=1e-12)

    def test_rejects_low_speed(self):
        with pytest.raises(SingularStateError):
            slip_angles(0.01, 0.0, 0.0, 0.0, PARAMS)


class TestTireForce:
    def test_odd_at_origin(self):
        assert tire_lateral_force(0.0, 5000.0, TIRES, 1.0) == 0.0

    def test_saturation_limit(self):
        fy_inf = tire_lateral_force(1e9, 5000.0, TIRES, 1.0)
        assert fy_inf == pytest.approx(-1.0 * 5000.0 * np.sin(TIRES.C * np.pi / 2),
                                       rel=1e-6)

    def test_formula_oracle(self):
        # alpha=0.1 on the static front axle load; frozen independent value
        fy = tire_lateral_force(0.1, PARAMS.F_zf, TIRES, 1.0)
        assert fy == pytest.approx(-9108.6405530502, abs=1e-6)

    def test_oddness_and_saturation_sweep(self):
        rng = np.random.default_rng(7)
        alpha = rng.uniform(-2.0, 2.0, size=500)
        fy = tire_lateral_force(alpha, 4000.0, TIRES, 0.9)
        fy_neg = tire_lateral_force(-alpha, 4000.0, TIRES, 0.9)
        assert np.allclose(fy, -fy_neg, atol=1e-12)
        assert np.all(np.abs(fy) <= 0.9 * 4000.0 + 1e-9)

    def test_rejects_nonpositive_load(self):
        with pytest.raises(ValueError):
            tire_lateral_force(0.1, 0.0, TIRES, 1.0)


class TestNominalDerivatives:
    def test_straight_rolling_equilibrium(self):
        rates = nominal_derivatives(BodyState(10.0, 0.0, 0.0),
                                    ControlInput(0.0, 0.0), PARAMS, TIRES)
        assert np.allclose(rates, 0.0, atol=1e-15)

    def test_yaw_rate_definitional_identity(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            st = BodyState(rng.uniform(2, 20), rng.uniform(-0.8, 0.8),
                           rng.uniform(-2, 2))
            u = ControlInput(rng.uniform(-0.5, 0.5), rng.uniform(-3000, 3000))
            rates = nominal_derivatives(st, u, PARAMS, TIRES)
            af, ar = slip_angles(st.V, st.beta, st.r, u.delta, PARAMS)
            fyf = tire_lateral_force(af, PARAMS.F_zf, TIRES, PARAMS.mu)
            fyr = tire_lateral_force(ar, PARAMS.F_zr, TIRES, PARAMS.mu)
            rdot = (PARAMS.a * fyf * np.cos(u.delta) - PARAMS.b * fyr) / PARAMS.I_z
            assert rates[2] == pytest.approx(rdot, rel=1e-12, abs=1e-12)

    def test_formula_oracle(self):
        # frozen from an independent evaluation of the full force balance
        rates = nominal_derivatives(BodyState(8.0, -0.3, 0.9),
                                    ControlInput(-0.2, 30.0), PARAMS, TIRES)
        assert rates[0] == pytest.approx(-0.807768377492241, abs=1e-12)
        assert rates[1] == pytest.approx(-0.888521898466262, abs=1e-12)
        assert rates[2] == pytest.approx(-6.801678052743155, abs=1e-12)

    def test_mirror_symmetry(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            V = rng.uniform(1, 20)
            beta, r = rng.uniform(-0.9, 0.9), rng.uniform(-2.5, 2.5)
            delta, F = rng.uniform(-0.5, 0.5), rng.uniform(-4000, 4000)
            x = np.array([V, beta, r])
            xm = np.array([V, -beta, -r])
            rates = body_rates(x, np.array([delta, F]), PARAMS, TIRES)
            rates_m = body_rates(xm, np.array([-delta, F]), PARAMS, TIRES)
            assert rates_m[0] == pytest.approx(rates[0], rel=1e-12, abs=1e-12)
            assert rates_m[1] == pytest.approx(-rates[1], rel=1e-12, abs=1e-12)
            assert rates_m[2] == pytest.approx(-rates[2], rel=1e-12, abs=1e-12)

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(5)
        X = np.column_stack([rng.uniform(2, 15, 20), rng.uniform(-0.5, 0.5, 20),
                             rng.uniform(-1.5, 1.5, 20)])
        U = np.column_stack([rng.uniform(-0.4, 0.4, 20),
                             rng.uniform(-2000, 2000, 20)])
        batch = body_rates(X, U, PARAMS, TIRES)
        for i in range(20):
            row = body_rates(X[i], U[i], PARAMS, TIRES)
            assert np.allclose(batch[i], row, atol=1e-14)


class TestRk4:
    def test_zero_derivative_keeps_state(self):
        x = np.array([1.0, 2.0, 3.0])
        out = integrate_rk4(lambda x_, u_: np.zeros(3), x, None, 0.1)
        assert np.array_equal(out, x)

    def test_linear_system_matches_matrix_exponential(self):
        A = np.array([[0.0, 1.0], [-4.0, -0.5]])
        x0 = np.array([1.0, -0.3])
        dt = 0.05
        out = integrate_rk4(lambda x_, u_: A @ x_, x0, None, dt)
        exact = expm(A * dt) @ x0
        # one-step RK4 error is O(dt^5)
        assert np.linalg.norm(out - exact) < 10 * dt**5

    def test_step_halving_fourth_order(self):
        A = np.array([[0.0, 1.0], [-4.0, -0.5]])
        x0 = np.array([1.0, -0.3])

        def err(dt):
            out = integrate_rk4(lambda x_, u_: A @ x_, x0, None, dt)
            return np.linalg.norm(out - expm(A * dt) @ x0)

        ratio = err(0.1) / err(0.05)
        assert 20 < ratio < 45  # ~2^5 = 32 for the one-step (local) error

    def test_equilibrium_fixed_point_1000_steps(self):
        # straight rolling is an equilibrium; 1000 RK4 steps must stay put
        x = np.array([10.0, 0.0, 0.0])
        u = np.array([0.0, 0.0])
        f = lambda x_, u_: body_rates(x_, u_, PARAMS, TIRES)
        xi = x.copy()
        for _ in range(1000):
            xi = integrate_rk4(f, xi, u, 0.01)
        assert np.linalg.norm(xi - x) < 1e-6

    def test_rejects_bad_dt(self):
        with pytest.raises(ValueError):
            integrate_rk4(lambda x_, u_: x_, np.zeros(2), None, 0.0)


class TestParamValidation:
    def test_rejects_bad_mass(self):
        with pytest.raises(ValueError):
            VehicleParams(m=-1, I_z=1, a=1, b=1, mu=1.0)

    def test_rejects_bad_mu(self):
        with pytest.raises(ValueError):
            VehicleParams(m=1, I_z=1, a=1, b=1, mu=1.7)

    def test_static_loads_sum_to_weight(self):
        assert PARAMS.F_zf + PARAMS.F_zr == pytest.approx(PARAMS.m * PARAMS.g)
