"""Differential-flatness feasibility oracle.

Maps a smooth trajectory to the motor speeds required to fly it on an
idealized quadrotor (no drag, no motor lag) and labels the trajectory
feasible when every sampled speed stays inside the motor envelope. This
is the cheap, low-fidelity constraint evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

THRUST_SINGULARITY_N = 0.1


class FlatnessSingularityError(RuntimeError):
    """Commanded thrust below 0.1 N; the flatness map is undefined near free fall."""


@dataclass
class QuadParams:
    """Physical quadrotor parameters (X configuration).

    Defaults mirror a 1 kg racing quad with 0.16 m arms. Thrust per motor
    is k_f * omega^2 [N], reaction torque k_m * omega^2 [N m].
    """

    mass: float = 1.0
    inertia: tuple[float, float, float] = (0.0082, 0.0082, 0.0149)
    arm_length: float = 0.16
    k_f: float = 1.9e-6
    k_m: float = 2.6e-8
    omega_min: float = 150.0
    omega_max: float = 2800.0
    gravity: float = 9.81
    drag_coeff: float = 0.1  # N s/m, used only by the 6-DOF simulation

    def __post_init__(self):
        positive = [self.mass, self.arm_length, self.k_f, self.k_m, self.omega_min, self.omega_max, self.gravity]
        if any(v <= 0 for v in positive) or any(i <= 0 for i in self.inertia):
            raise ValueError("quad parameters must be strictly positive")
        if self.omega_min >= self.omega_max:
            raise ValueError("omega_min must be below omega_max")

    @classmethod
    def from_dict(cls, data: dict) -> "QuadParams":
        kwargs = {}
        mapping = {
            "mass_kg": "mass",
            "inertia_kgm2": "inertia",
            "arm_length_m": "arm_length",
            "k_f": "k_f",
            "k_m": "k_m",
            "motor_speed_bounds_rad_s": None,
            "gravity_m_s2": "gravity",
            "drag_coeff_n_s_m": "drag_coeff",
        }
        for key, attr in mapping.items():
            if key not in data:
                continue
            if key == "motor_speed_bounds_rad_s":
                kwargs["omega_min"], kwargs["omega_max"] = (float(v) for v in data[key])
            elif key == "inertia_kgm2":
                kwargs["inertia"] = tuple(float(v) for v in data[key])
            else:
                kwargs[attr] = float(data[key])
        return cls(**kwargs)

    def hover_speed(self) -> float:
        return float(np.sqrt(self.mass * self.gravity / (4.0 * self.k_f)))


@dataclass
class ControllerGains:
    """Tracking controller gains; part of the experiment definition since
    high-fidelity feasibility labels depend on them."""

    kp_pos: float = 10.0
    kd_pos: float = 6.5
    kr_att: float = 250.0
    kw_att: float = 30.0
    motor_tau: float = 0.03  # s, first-order motor lag

    @classmethod
    def from_dict(cls, data: dict) -> "ControllerGains":
        return cls(**{k: float(v) for k, v in data.items() if k in cls.__dataclass_fields__})


def mixer_matrix(params: QuadParams) -> np.ndarray:
    """Allocation matrix M with [f, Mx, My, Mz]^T = M @ omega^2.

    Motors sit on the X diagonals at distance arm_length from center:
    1 front-left (+x, +y, spin +z), 2 rear-left (-x, +y, spin -z),
    3 rear-right (-x, -y, spin +z), 4 front-right (+x, -y, spin -z).
    """
    d = params.arm_length / np.sqrt(2.0)
    kf, km = params.k_f, params.k_m
    return np.array(
        [
            [kf, kf, kf, kf],
            [kf * d, kf * d, -kf * d, -kf * d],
            [-kf * d, kf * d, kf * d, -kf * d],
            [km, -km, km, -km],
        ]
    )


def motor_speeds_from_wrench(thrust: float, moments: np.ndarray, params: QuadParams) -> np.ndarray:
    """Invert the allocation matrix; negative squared speeds clamp to zero."""
    wrench = np.array([thrust, moments[0], moments[1], moments[2]])
    omega_sq = np.linalg.solve(mixer_matrix(params), wrench)
    return np.sqrt(np.clip(omega_sq, 0.0, None))


def flat_chain(
    pos_derivs: np.ndarray, yaw_derivs: np.ndarray, params: QuadParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized flatness chain over n samples.

    Parameters
    ----------
    pos_derivs : (n, 5, 3) position derivatives 0..4 (position through snap).
    yaw_derivs : (n, 3) yaw, yaw rate, yaw acceleration.

    Returns
    -------
    (thrust (n,) [N], R (n, 3, 3) with columns x_b, y_b, z_b,
     omega_body (n, 3), omega_dot_body (n, 3))
    """
    m, g = params.mass, params.gravity
    acc = pos_derivs[:, 2]
    jerk = pos_derivs[:, 3]
    snap = pos_derivs[:, 4]
    psi = yaw_derivs[:, 0]
    dpsi = yaw_derivs[:, 1]
    ddpsi = yaw_derivs[:, 2]

    F = m * acc
    F[:, 2] += m * g
    f = np.linalg.norm(F, axis=1)
    if np.any(f < THRUST_SINGULARITY_N):
        idx = int(np.argmin(f))
        raise FlatnessSingularityError(
            f"commanded thrust {f[idx]:.4f} N below singularity threshold (sample {idx})"
        )
    z_b = F / f[:, None]
    x_c = np.stack([np.cos(psi), np.sin(psi), np.zeros_like(psi)], axis=1)
    y_c = np.stack([-np.sin(psi), np.cos(psi), np.zeros_like(psi)], axis=1)
    wvec = np.cross(z_b, x_c)
    n_norm = np.linalg.norm(wvec, axis=1)
    y_b = wvec / n_norm[:, None]
    x_b = np.cross(y_b, z_b)
    R = np.stack([x_b, y_b, z_b], axis=2)

    def dot(a, b):
        return np.sum(a * b, axis=1)

    Fd = m * jerk
    fd = dot(z_b, Fd)
    z_b_dot = (Fd - fd[:, None] * z_b) / f[:, None]

    # omega from z_b_dot = omega x z_b plus the yaw component r = -x_b . y_b_dot
    p = -dot(y_b, z_b_dot)
    q = dot(x_b, z_b_dot)
    x_c_dot = dpsi[:, None] * y_c
    w_dot = np.cross(z_b_dot, x_c) + np.cross(z_b, x_c_dot)
    r = -dot(x_b, w_dot) / n_norm
    omega_w = p[:, None] * x_b + q[:, None] * y_b + r[:, None] * z_b

    # second derivatives for the angular acceleration
    Fdd = m * snap
    fdd = dot(z_b_dot, Fd) + dot(z_b, Fdd)
    z_b_ddot = (Fdd - fdd[:, None] * z_b - 2.0 * fd[:, None] * z_b_dot) / f[:, None]
    u = z_b_ddot - np.cross(omega_w, np.cross(omega_w, z_b))
    a1 = -dot(y_b, u)
    a2 = dot(x_b, u)

    x_c_ddot = ddpsi[:, None] * y_c - (dpsi**2)[:, None] * x_c
    w_ddot = np.cross(z_b_ddot, x_c) + 2.0 * np.cross(z_b_dot, x_c_dot) + np.cross(z_b, x_c_ddot)
    n_dot = dot(y_b, w_dot)
    n_ddot = (dot(w_dot, w_dot) + dot(wvec, w_ddot) - n_dot**2) / n_norm
    y_b_dot = w_dot / n_norm[:, None] - wvec * (n_dot / n_norm**2)[:, None]
    y_b_ddot = (
        w_ddot / n_norm[:, None]
        - 2.0 * w_dot * (n_dot / n_norm**2)[:, None]
        - wvec * (n_ddot / n_norm**2)[:, None]
        + 2.0 * wvec * (n_dot**2 / n_norm**3)[:, None]
    )
    x_b_dot = np.cross(y_b_dot, z_b) + np.cross(y_b, z_b_dot)
    r_dot = -(dot(x_b_dot, y_b_dot) + dot(x_b, y_b_ddot))
    omega_dot_w = a1[:, None] * x_b + a2[:, None] * y_b + r_dot[:, None] * z_b

    omega_body = np.einsum("nij,nj->ni", R.transpose(0, 2, 1), omega_w)
    omega_dot_body = np.einsum("nij,nj->ni", R.transpose(0, 2, 1), omega_dot_w)
    return f, R, omega_body, omega_dot_body


def flat_reference(
    pos_derivs: np.ndarray, yaw_derivs: np.ndarray, params: QuadParams
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Single-sample flatness chain; see flat_chain for conventions."""
    f, R, omega, omega_dot = flat_chain(pos_derivs[None], np.asarray(yaw_derivs, dtype=float)[None], params)
    return float(f[0]), R[0], omega[0], omega_dot[0]


def _trajectory_samples(traj, dt: float) -> np.ndarray:
    T = traj.duration
    n = int(np.floor(T / dt + 1e-9)) + 1
    ts = np.minimum(np.arange(n) * dt, T)
    if ts[-1] < T - 1e-12:
        ts = np.append(ts, T)
    return ts


def flat_motor_speeds(traj, params: QuadParams, dt: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
    """Required motor speeds along a trajectory, sampled every dt seconds.

    traj must expose eval(ts, deriv) with four channels (x, y, z, yaw)
    and a duration attribute. Returns (times, speeds (n, 4)).
    """
    ts = _trajectory_samples(traj, dt)
    derivs = np.stack([traj.eval(ts, deriv=d) for d in range(5)], axis=1)  # (n, 5, 4)
    f, _, omega_b, omega_dot_b = flat_chain(derivs[:, :, :3], derivs[:, :3, 3], params)
    inertia = np.asarray(params.inertia)
    I_omega = omega_b * inertia
    moments = omega_dot_b * inertia + np.cross(omega_b, I_omega)
    wrench = np.column_stack([f, moments])
    omega_sq = np.linalg.solve(mixer_matrix(params), wrench.T).T
    return ts, np.sqrt(np.clip(omega_sq, 0.0, None))


def check_feasible_low(traj, params: QuadParams, dt: float = 0.01) -> bool:
    """True iff every sampled motor speed lies inside [omega_min, omega_max].

    A flatness singularity along the trajectory labels it infeasible.
    """
    try:
        _, speeds = flat_motor_speeds(traj, params, dt)
    except FlatnessSingularityError:
        return False
    return bool(np.all(speeds >= params.omega_min) and np.all(speeds <= params.omega_max))
