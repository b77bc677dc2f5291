"""Formation-control baseline.

The fleet moves as a rigid pattern around a formation center: a smooth
scale profile interpolates the per-waypoint formation radii, a yaw
profile interpolates the formation heading, the center flies a
minimum-snap trajectory through a corridor tightened by the scale
profile on obstacle faces, and each vehicle rides at
center + R_z(yaw) * (scale / max_scale) * offset. Everything is slowed
down uniformly until all vehicles pass the motor-speed check.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from .config import OptimizerConfig
from .flatness import check_feasible_low
from .geometry import EmptyPolytopeError, Environment, FormationSchedule, Polytope, interior_point
from .polyqp import PiecewisePoly, PolyQP, QpInfeasibleError, chebyshev_lobatto
from .polytraj import (
    N_COLLOCATION,
    PiecewiseTrajectory,
    SnapObjectiveWeights,
    initial_allocation,
    min_snap,
    objective_sigma,
    scale_to_feasible,
)

_COLLOCATION_S = chebyshev_lobatto(N_COLLOCATION)


class FormationInconsistentError(ValueError):
    """Environment poses do not lie on the formation pattern."""


def _interval_durations(schedule: FormationSchedule, durations: np.ndarray) -> np.ndarray:
    return schedule.interval_sums(np.asarray(durations, dtype=float))


def formation_scale_profile(schedule: FormationSchedule, durations: np.ndarray) -> PiecewisePoly:
    """Smoothest scale profile hitting every formation radius.

    One degree-7 segment per formation interval, C4 continuity, minimum
    integrated squared fourth derivative, with the profile capped at the
    larger of each interval's endpoint radii (collocation-enforced).
    """
    spans = _interval_durations(schedule, durations)
    bounds = schedule.scale_bounds
    qp = PolyQP(durations=spans, n_channels=1)
    qp.set_cost({0: (4, 1.0)})
    qp.add_continuity(0, 4)
    qp.add_point_eq(0, 0.0, 0, 0, float(bounds[0]))
    for k in range(len(spans)):
        qp.add_point_eq(k, 1.0, 0, 0, float(bounds[k + 1]))
        cap = float(max(bounds[k], bounds[k + 1]))
        for s in _COLLOCATION_S:
            qp.add_combination_ineq(k, s, np.array([1.0]), cap)
    return qp.solve()


def formation_yaw_profile(schedule: FormationSchedule, durations: np.ndarray) -> PiecewisePoly:
    """Minimum-yaw-acceleration interpolant of the formation headings,
    at rest (zero rate) at both ends."""
    spans = _interval_durations(schedule, durations)
    refs = schedule.yaw_refs
    qp = PolyQP(durations=spans, n_channels=1)
    qp.set_cost({0: (2, 1.0)})
    qp.add_continuity(0, 2)
    qp.add_point_eq(0, 0.0, 0, 0, float(refs[0]))
    qp.add_point_eq(0, 0.0, 1, 0, 0.0)
    qp.add_point_eq(len(spans) - 1, 1.0, 1, 0, 0.0)
    for k in range(len(spans)):
        qp.add_point_eq(k, 1.0, 0, 0, float(refs[k + 1]))
    return qp.solve()


def _center_schedule(env: Environment) -> tuple[np.ndarray, np.ndarray, list[tuple[int, np.ndarray]]]:
    """Center start/end poses and waypoint pins (midpoints of the fleet)."""
    sched = env.formation
    start = env.starts.mean(axis=0)
    end = env.ends.mean(axis=0)
    start[3] = sched.yaw_refs[0]
    end[3] = sched.yaw_refs[-1]
    waypoints = []
    for k, e in enumerate(sched.segment_ends):
        pose = np.zeros(4)
        pose[:3] = sched.waypoints[:, k, :3].mean(axis=0)
        pose[3] = sched.yaw_refs[k + 1]
        waypoints.append((e, pose))
    return start, end, waypoints


def _check_tightened_nonempty(corridor: list[Polytope], profile: PiecewisePoly, knots: np.ndarray):
    for j, poly in enumerate(corridor):
        ts = np.linspace(knots[j], knots[j + 1], 8)
        worst = float(profile.eval(np.clip(ts, 0.0, profile.duration))[:, 0].max())
        tightened = Polytope(poly.A, poly.b - worst * poly.passage_mask, poly.passage_mask)
        try:
            interior_point(tightened)
        except EmptyPolytopeError as exc:
            raise QpInfeasibleError(
                f"corridor segment {j} narrower than the formation (margin {worst:.3f} m)"
            ) from exc


def formation_center_trajectory(
    env: Environment,
    durations: np.ndarray,
    profile: PiecewisePoly,
    weights: SnapObjectiveWeights | None = None,
) -> PiecewiseTrajectory:
    """Minimum-snap center trajectory with obstacle faces tightened by the
    scale profile (passage faces are left untouched)."""
    corridor = env.corridors[0]
    durations = np.asarray(durations, dtype=float)
    knots = np.concatenate([[0.0], np.cumsum(durations)])
    _check_tightened_nonempty(corridor, profile, knots)
    start, end, waypoints = _center_schedule(env)

    def face_margin(t: float, seg: int) -> np.ndarray:
        b = float(profile.eval(min(t, profile.duration))[0, 0])
        return -b * corridor[seg].passage_mask

    return min_snap(durations, corridor, start, end, waypoints, weights, face_margin=face_margin)


def formation_offsets(env: Environment) -> np.ndarray:
    """Per-vehicle offsets in the formation frame.

    Explicit offsets from the schedule when present, else a regular
    polygon of radius max(scale_bounds) in the horizontal plane.
    """
    sched = env.formation
    if sched.offsets is not None:
        return sched.offsets
    radius = float(sched.scale_bounds.max())
    angles = 2.0 * np.pi * np.arange(env.n_vehicles) / env.n_vehicles
    return np.stack([radius * np.cos(angles), radius * np.sin(angles), np.zeros_like(angles)], axis=1)


@dataclass
class FormationPath:
    """One vehicle's path riding the formation: center + rotating scaled offset."""

    center: PiecewiseTrajectory
    profile: PiecewisePoly
    yaw_profile: PiecewisePoly
    offset: np.ndarray
    max_scale: float

    @property
    def duration(self) -> float:
        return self.center.duration

    def eval(self, ts, deriv: int = 0) -> np.ndarray:
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        out = self.center.eval(ts, deriv).copy()
        tp = np.clip(ts, 0.0, self.profile.duration)

        # scale amplitude and heading derivative chains
        A = [self.profile.eval(tp, d)[:, 0] / self.max_scale for d in range(deriv + 1)]
        th = [self.yaw_profile.eval(tp, d)[:, 0] for d in range(5)]
        r = float(np.hypot(self.offset[0], self.offset[1]))
        phase = float(np.arctan2(self.offset[1], self.offset[0]))

        # derivatives of e^{i theta(t)} via the exponential Bell polynomials
        z1 = 1j * th[1]
        z2 = 1j * th[2]
        z3 = 1j * th[3]
        z4 = 1j * th[4]
        F = [
            np.ones_like(z1),
            z1,
            z2 + z1**2,
            z3 + 3 * z1 * z2 + z1**3,
            z4 + 4 * z1 * z3 + 3 * z2**2 + 6 * z1**2 * z2 + z1**4,
        ]
        w = np.exp(1j * (th[0] + phase))
        w_derivs = [F[k] * w for k in range(5)]

        g = np.zeros((len(ts), 3), dtype=complex)
        for j in range(deriv + 1):
            g[:, 0] += comb(deriv, j) * A[j] * w_derivs[deriv - j]
        g[:, 2] = A[deriv] * self.offset[2] if deriv < len(A) else 0.0
        out[:, 0] += r * g[:, 0].real
        out[:, 1] += r * g[:, 0].imag
        out[:, 2] += g[:, 2].real
        out[:, 3] = th[deriv]  # vehicle yaw follows the formation heading
        return out

    def eval_held(self, ts) -> np.ndarray:
        ts = np.clip(np.atleast_1d(np.asarray(ts, dtype=float)), 0.0, self.duration)
        return self.eval(ts)[:, :3]


def _validate_pattern(env: Environment, offsets: np.ndarray):
    """The fleet must sit on the formation pattern at departure and arrival.

    Interior waypoints are not checked: the baseline attains only the
    schedule's center/scale/yaw at formations, not the per-vehicle pins.
    """
    sched = env.formation
    b_max = float(sched.scale_bounds.max())
    start, end, _ = _center_schedule(env)

    def pattern_pose(center3, yaw, scale):
        c, s = np.cos(yaw), np.sin(yaw)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return center3[None, :] + (scale / b_max) * (offsets @ R.T)

    checks = [(env.starts, start, sched.yaw_refs[0], sched.scale_bounds[0], "start")]
    checks.append((env.ends, end, sched.yaw_refs[-1], sched.scale_bounds[-1], "end"))
    for poses, center, yaw, scale, name in checks:
        expect = pattern_pose(center[:3], yaw, scale)
        if np.abs(poses[:, :3] - expect).max() > 1e-6:
            raise FormationInconsistentError(f"{name} poses do not match the formation pattern")


def formation_baseline(
    env: Environment, config: OptimizerConfig | None = None
) -> tuple[float, list[FormationPath]]:
    """Formation-control solution: center allocation, profiles, vehicle
    paths, then uniform slow-down until every vehicle's motor speeds are
    admissible. Returns (makespan, per-vehicle paths)."""
    config = config or OptimizerConfig()
    weights = SnapObjectiveWeights(config.mu_r, config.mu_psi)
    offsets = formation_offsets(env)
    _validate_pattern(env, offsets)
    sched = env.formation
    m = env.n_segments
    b_max = float(sched.scale_bounds.max())
    start, end, waypoints = _center_schedule(env)

    def objective(x: np.ndarray) -> float:
        profile = formation_scale_profile(sched, x)
        traj = formation_center_trajectory(env, x, profile, weights)
        return objective_sigma(traj, weights)

    corridor = env.corridors[0]
    alloc = initial_allocation(
        config.init_seconds_per_segment * m, corridor, start, end, waypoints, weights, objective=objective
    )

    def build(x: np.ndarray) -> list[FormationPath]:
        profile = formation_scale_profile(sched, x)
        yaw_prof = formation_yaw_profile(sched, x)
        center = formation_center_trajectory(env, x, profile, weights)
        return [FormationPath(center, profile, yaw_prof, offsets[i], b_max) for i in range(env.n_vehicles)]

    def oracle(x: np.ndarray) -> bool:
        try:
            paths = build(x)
        except QpInfeasibleError:
            return False
        return all(check_feasible_low(p, env.quad_params, config.flatness_dt) for p in paths)

    _, scaled = scale_to_feasible(alloc, oracle, eta_lo=0.05, eta_hi=20.0)
    paths = build(scaled)
    return float(scaled.sum()), paths
