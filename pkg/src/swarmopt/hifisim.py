"""High-fidelity feasibility oracle: 6-DOF rigid-body simulation.

RK4 integration at 500 Hz of quadrotor rigid-body dynamics (motor
thrusts with first-order lag, gravity, linear drag, body gyroscopic
moment) under a cascaded geometric tracking controller with flatness
feedforward. A trajectory is labeled feasible when the closed-loop
position error stays within the tracking bound; the simulated (tracked)
path feeds the high-fidelity collision checks.

The linear drag term is deliberately absent from the flatness oracle,
so the two fidelity levels disagree most at high speed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .collision import SampledPath
from .flatness import (
    ControllerGains,
    FlatnessSingularityError,
    QuadParams,
    flat_chain,
    mixer_matrix,
)

SIM_RATE_HZ = 500.0
OUTPUT_RATE_HZ = 100.0
DIVERGENCE_ERROR_M = 5.0
MAX_SIM_DURATION_S = 120.0


class SimulationDivergedError(RuntimeError):
    """Position error exceeded the crash threshold."""


@dataclass
class RigidState:
    """Rigid-body state: position, velocity, attitude quaternion (w,x,y,z),
    body angular velocity, motor speeds."""

    pos: np.ndarray
    vel: np.ndarray
    quat: np.ndarray
    omega: np.ndarray
    motors: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.pos, self.vel, self.quat, self.omega, self.motors])

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "RigidState":
        return cls(x[0:3].copy(), x[3:6].copy(), x[6:10].copy(), x[10:13].copy(), x[13:17].copy())


@dataclass
class TrackResult:
    """Closed-loop tracking outcome sampled at 100 Hz."""

    times: np.ndarray
    positions: np.ndarray  # tracked positions (n, 3)
    errors: np.ndarray  # position error magnitude (n,)
    motor_speeds: np.ndarray  # simulated motor speeds (n, 4)
    completed: bool

    @property
    def max_error(self) -> float:
        return float(self.errors.max())

    def tracked_path(self) -> SampledPath:
        return SampledPath(times=self.times, positions=self.positions)


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rot_to_quat(R: np.ndarray) -> np.ndarray:
    w = 0.5 * np.sqrt(max(1.0 + R[0, 0] + R[1, 1] + R[2, 2], 0.0))
    if w > 1e-6:
        x = (R[2, 1] - R[1, 2]) / (4 * w)
        y = (R[0, 2] - R[2, 0]) / (4 * w)
        z = (R[1, 0] - R[0, 1]) / (4 * w)
    else:
        x = 0.5 * np.sqrt(max(1.0 + R[0, 0] - R[1, 1] - R[2, 2], 0.0))
        y = (R[0, 1] + R[1, 0]) / (4 * x)
        z = (R[0, 2] + R[2, 0]) / (4 * x)
        w = (R[2, 1] - R[1, 2]) / (4 * x)
    q = np.array([w, x, y, z])
    return q / np.linalg.norm(q)


def _dynamics(
    x: np.ndarray,
    omega_cmd: np.ndarray,
    params: QuadParams,
    gravity: float,
    drag: float,
    motor_tau: float,
    inertia: np.ndarray,
    inertia_inv: np.ndarray,
    mix: np.ndarray,
) -> np.ndarray:
    """Time derivative of the 17-element state vector."""
    vel = x[3:6]
    q = x[6:10]
    omega = x[10:13]
    motors = x[13:17]

    R = quat_to_rot(q)
    omega_sq = motors * motors
    wrench = mix @ omega_sq
    force_world = R[:, 2] * wrench[0] - drag * vel
    force_world[2] -= params.mass * gravity
    acc = force_world / params.mass

    moments = wrench[1:4]
    omega_dot = inertia_inv @ (moments - np.cross(omega, inertia @ omega))

    dq = 0.5 * np.array(
        [
            -q[1] * omega[0] - q[2] * omega[1] - q[3] * omega[2],
            q[0] * omega[0] + q[2] * omega[2] - q[3] * omega[1],
            q[0] * omega[1] - q[1] * omega[2] + q[3] * omega[0],
            q[0] * omega[2] + q[1] * omega[1] - q[2] * omega[0],
        ]
    )
    dmotors = (omega_cmd - motors) / motor_tau

    dx = np.empty(17)
    dx[0:3] = vel
    dx[3:6] = acc
    dx[6:10] = dq
    dx[10:13] = omega_dot
    dx[13:17] = dmotors
    return dx


def rk4_step(x: np.ndarray, omega_cmd: np.ndarray, dt: float, args: tuple) -> np.ndarray:
    k1 = _dynamics(x, omega_cmd, *args)
    k2 = _dynamics(x + 0.5 * dt * k1, omega_cmd, *args)
    k3 = _dynamics(x + 0.5 * dt * k2, omega_cmd, *args)
    k4 = _dynamics(x + dt * k3, omega_cmd, *args)
    x_new = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    x_new[6:10] /= np.linalg.norm(x_new[6:10])
    return x_new


def _vee(M: np.ndarray) -> np.ndarray:
    return np.array([M[2, 1], M[0, 2], M[1, 0]])


def _reference_arrays(traj, params: QuadParams, ts: np.ndarray):
    """Reference states and flatness feedforward at the control steps."""
    derivs = np.stack([traj.eval(ts, deriv=d) for d in range(5)], axis=1)  # (n, 5, 4)
    thrust, R_ref, omega_ref, _ = flat_chain(derivs[:, :, :3], derivs[:, :3, 3], params)
    return derivs[:, 0, :3], derivs[:, 1, :3], derivs[:, 2, :3], derivs[:, 0, 3], thrust, R_ref, omega_ref


def simulate_tracking(
    traj,
    params: QuadParams,
    gains: ControllerGains | None = None,
    raise_on_divergence: bool = False,
) -> TrackResult:
    """Closed-loop tracking simulation of one trajectory.

    Returns the tracked path and position-error series at 100 Hz. When
    the error exceeds the 5 m crash threshold the rollout stops with
    completed=False (or raises if raise_on_divergence).
    """
    if traj.duration > MAX_SIM_DURATION_S:
        raise ValueError("trajectory duration exceeds the simulation runaway guard")
    gains = gains or ControllerGains()
    dt = 1.0 / SIM_RATE_HZ
    n_steps = int(np.ceil(traj.duration / dt))
    ts = np.minimum(np.arange(n_steps + 1) * dt, traj.duration)
    pos_ref, vel_ref, acc_ref, yaw_ref, thrust_ref, R_ref, omega_ref = _reference_arrays(traj, params, ts)

    inertia = np.diag(params.inertia)
    inertia_inv = np.diag(1.0 / np.asarray(params.inertia))
    mix = mixer_matrix(params)
    mix_inv = np.linalg.inv(mix)
    dyn_args = (params, params.gravity, params.drag_coeff, gains.motor_tau, inertia, inertia_inv, mix)
    g_e3 = np.array([0.0, 0.0, params.gravity])

    x = np.empty(17)
    x[0:3] = pos_ref[0]
    x[3:6] = vel_ref[0]
    x[6:10] = rot_to_quat(R_ref[0])
    x[10:13] = omega_ref[0]
    x[13:17] = np.clip(mix_inv @ np.array([thrust_ref[0], 0, 0, 0]), params.omega_min**2, params.omega_max**2) ** 0.5

    keep_every = int(round(SIM_RATE_HZ / OUTPUT_RATE_HZ))
    out_times, out_pos, out_err, out_motors = [], [], [], []
    completed = True
    for i in range(n_steps + 1):
        err = np.linalg.norm(x[0:3] - pos_ref[i])
        if i % keep_every == 0 or i == n_steps:
            out_times.append(ts[i])
            out_pos.append(x[0:3].copy())
            out_err.append(err)
            out_motors.append(x[13:17].copy())
        if err > DIVERGENCE_ERROR_M:
            completed = False
            if raise_on_divergence:
                raise SimulationDivergedError(f"position error {err:.2f} m at t={ts[i]:.2f} s")
            break
        if i == n_steps:
            break

        R = quat_to_rot(x[6:10])
        a_des = acc_ref[i] + gains.kp_pos * (pos_ref[i] - x[0:3]) + gains.kd_pos * (vel_ref[i] - x[3:6])
        F_des = params.mass * (a_des + g_e3)
        f_cmd = float(F_des @ R[:, 2])
        norm_F = np.linalg.norm(F_des)
        if norm_F < 1e-9:
            F_des = params.mass * g_e3
            norm_F = np.linalg.norm(F_des)
        z_des = F_des / norm_F
        x_c = np.array([np.cos(yaw_ref[i]), np.sin(yaw_ref[i]), 0.0])
        y_des = np.cross(z_des, x_c)
        y_des /= np.linalg.norm(y_des)
        R_des = np.column_stack([np.cross(y_des, z_des), y_des, z_des])

        e_R = 0.5 * _vee(R_des.T @ R - R.T @ R_des)
        e_w = x[10:13] - R.T @ R_des @ omega_ref[i]
        M_cmd = inertia @ (-gains.kr_att * e_R - gains.kw_att * e_w) + np.cross(x[10:13], inertia @ x[10:13])
        omega_sq_cmd = mix_inv @ np.concatenate([[f_cmd], M_cmd])
        omega_cmd = np.clip(np.sqrt(np.clip(omega_sq_cmd, 0.0, None)), params.omega_min, params.omega_max)

        x = rk4_step(x, omega_cmd, ts[i + 1] - ts[i], dyn_args)

    return TrackResult(
        times=np.array(out_times),
        positions=np.array(out_pos),
        errors=np.array(out_err),
        motor_speeds=np.array(out_motors),
        completed=completed,
    )


def check_feasible_high(
    traj,
    params: QuadParams,
    gains: ControllerGains | None = None,
    error_bound: float = 0.05,
) -> tuple[bool, SampledPath]:
    """Label a trajectory by closed-loop tracking error.

    True iff the rollout completes with max position error <= error_bound.
    The returned tracked path feeds the high-fidelity collision checks,
    so collisions are judged on anticipated (tracked) positions.
    """
    try:
        result = simulate_tracking(traj, params, gains)
    except FlatnessSingularityError:
        # reference generation failed: unreachable for the controller
        ts = np.array([0.0, traj.duration])
        p0 = traj.eval(0.0)[0, :3]
        return False, SampledPath(times=ts, positions=np.vstack([p0, p0]))
    label = result.completed and result.max_error <= error_bound
    return label, result.tracked_path()
