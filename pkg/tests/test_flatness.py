import numpy as np
import pytest

from swarmopt.flatness import (
    FlatnessSingularityError,
    QuadParams,
    check_feasible_low,
    flat_motor_speeds,
    mixer_matrix,
    motor_speeds_from_wrench,
)
from swarmopt.polytraj import PiecewiseTrajectory, min_snap, scale_to_feasible

from .oracles import AnalyticTrajectory, inverse_dynamics_motor_speeds


def hover_trajectory(duration=2.0, pos=(0.3, -0.1, 1.2), yaw=0.0):
    coeffs = np.zeros((1, 8, 4))
    coeffs[0, 0, :3] = pos
    coeffs[0, 0, 3] = yaw
    return PiecewiseTrajectory(coeffs=coeffs, knots=np.array([0.0, duration]))


def circular_trajectory(radius=1.0, period=2.0, z=1.0, turns=1.0):
    w = 2 * np.pi / period

    def fn(ts, deriv):
        out = np.zeros((len(ts), 4))
        phase = w * ts
        rot = np.exp(1j * (phase + deriv * np.pi / 2)) * radius * w**deriv
        out[:, 0] = rot.real
        out[:, 1] = rot.imag
        if deriv == 0:
            out[:, 2] = z
        return out

    return AnalyticTrajectory(fn, duration=period * turns)


class TestFlatMotorSpeeds:
    def test_hover_speed_exact(self):
        params = QuadParams()
        _, speeds = flat_motor_speeds(hover_trajectory(), params)
        expected = np.sqrt(params.mass * params.gravity / (4 * params.k_f))
        assert np.abs(speeds - expected).max() < 1e-9

    def test_steady_vertical_acceleration(self):
        params = QuadParams()
        a = 2.5
        coeffs = np.zeros((1, 8, 4))
        coeffs[0, 0, 2] = 1.0
        coeffs[0, 2, 2] = a / 2.0
        traj = PiecewiseTrajectory(coeffs=coeffs, knots=np.array([0.0, 1.0]))
        _, speeds = flat_motor_speeds(traj, params)
        expected = np.sqrt(params.mass * (params.gravity + a) / (4 * params.k_f))
        assert np.abs(speeds - expected).max() < 1e-9

    def test_circular_matches_inverse_dynamics_oracle(self):
        params = QuadParams()
        traj = circular_trajectory(radius=1.0, period=2.0)
        for t in (0.3, 0.75, 1.2, 1.6):
            ts, speeds = flat_motor_speeds(traj, params, dt=0.01)
            idx = int(round(t / 0.01))
            oracle = inverse_dynamics_motor_speeds(traj, params, float(ts[idx]))
            assert np.abs(speeds[idx] - oracle).max() / oracle.max() < 0.02

    def test_free_fall_singularity(self):
        params = QuadParams()
        coeffs = np.zeros((1, 8, 4))
        coeffs[0, 0, 2] = 10.0
        coeffs[0, 2, 2] = -params.gravity / 2.0  # exact free fall
        traj = PiecewiseTrajectory(coeffs=coeffs, knots=np.array([0.0, 1.0]))
        with pytest.raises(FlatnessSingularityError):
            flat_motor_speeds(traj, params)
        assert check_feasible_low(traj, params) is False

    def test_yaw_offset_invariance_of_thrust(self):
        # a constant yaw offset rotates the body frame against the world
        # moment, redistributing speeds among motors; with Ixx == Iyy the
        # collective thrust (k_f * sum omega^2) is exactly unchanged
        params = QuadParams(inertia=(0.009, 0.009, 0.015))
        traj = min_snap(np.array([1.0, 1.0]), None, [0, 0, 1, 0.2], [1, 0.5, 1.4, 1.1], waypoints=[(1, np.array([0.6, 0.1, 1.2, 0.5]))])
        _, speeds = flat_motor_speeds(traj, params)
        shifted = PiecewiseTrajectory(coeffs=traj.coeffs.copy(), knots=traj.knots.copy())
        shifted.coeffs[:, 0, 3] += 1.234
        _, speeds2 = flat_motor_speeds(shifted, params)
        thrust = params.k_f * np.sum(speeds**2, axis=1)
        thrust2 = params.k_f * np.sum(speeds2**2, axis=1)
        assert np.abs(thrust - thrust2).max() < 1e-9

    def test_angular_rates_match_finite_differences(self):
        # analytic omega / omega_dot chain cross-checked against FD of itself
        from swarmopt.flatness import flat_reference

        params = QuadParams()
        traj = min_snap(np.array([1.3]), None, [0, 0, 1, 0], [1, 0.7, 1.5, 0.8])

        def chain(t):
            pd = np.stack([traj.eval(t, d)[0, :3] for d in range(5)])
            yd = np.array([traj.eval(t, d)[0, 3] for d in range(3)])
            return flat_reference(pd, yd, params)

        t0, h = 0.6, 1e-5
        _, _, w_minus, _ = chain(t0 - h)
        _, _, w_plus, _ = chain(t0 + h)
        _, _, w0, wdot0 = chain(t0)
        fd = (w_plus - w_minus) / (2 * h)
        # body-frame rates: d/dt(R^T w_world) = R^T wdot_world = alpha_body
        assert np.abs(fd - wdot0).max() < 1e-4 * max(1.0, np.abs(wdot0).max())


class TestMixer:
    def test_round_trip_identity(self):
        params = QuadParams()
        M = mixer_matrix(params)
        assert np.abs(M @ np.linalg.inv(M) - np.eye(4)).max() < 1e-12

    def test_pure_thrust_equal_speeds(self):
        params = QuadParams()
        speeds = motor_speeds_from_wrench(8.0, np.zeros(3), params)
        assert np.allclose(speeds, speeds[0])

    def test_negative_squared_speeds_clamp_to_zero(self):
        params = QuadParams()
        speeds = motor_speeds_from_wrench(0.01, np.array([0.5, 0, 0]), params)
        assert speeds.min() == 0.0


class TestCheckFeasibleLow:
    def test_hover_within_bounds(self):
        assert check_feasible_low(hover_trajectory(), QuadParams()) is True

    def test_hover_infeasible_when_omega_max_below_hover(self):
        params = QuadParams(omega_min=150.0, omega_max=800.0)  # hover needs ~1136
        assert check_feasible_low(hover_trajectory(), params) is False

    def test_time_scaling_monotone_max_speed_on_dash(self):
        params = QuadParams()
        base = np.array([1.0])
        prev = np.inf
        for eta in np.linspace(1.0, 5.0, 9):
            traj = min_snap(base * eta, None, [0, 0, 1, 0], [8, 0, 1, 0])
            _, speeds = flat_motor_speeds(traj, params)
            peak = speeds.max()
            assert peak <= prev + 1e-9
            prev = peak

    def test_scale_to_feasible_consistency(self):
        params = QuadParams()
        base = np.array([0.5])  # 10 m dash in 0.5 s: infeasible

        def oracle(durations):
            return check_feasible_low(min_snap(durations, None, [0, 0, 1, 0], [10, 0, 1, 0]), params)

        eta, scaled = scale_to_feasible(base, oracle, eta_lo=0.1, eta_hi=20.0)
        assert oracle(scaled) is True
        assert oracle(0.95 * scaled) is False
        assert np.allclose(scaled, base * eta)
