"""Minimum-snap piecewise-polynomial trajectories through polytope corridors.

The central object is the mapping from a per-segment time allocation to
the smoothest corridor-constrained trajectory attaining the boundary
poses and formation waypoints: degree-7 segments, C4 position and C2 yaw
continuity, zero velocity/acceleration/jerk at both ends, and corridor
inequalities enforced at 16 Chebyshev-Lobatto collocation points per
segment with active-set refinement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .geometry import Polytope
from .polyqp import (
    PiecewisePoly,
    PolyQP,
    QpConditioningError,
    QpInfeasibleError,
    chebyshev_lobatto,
    gram_matrix_local,
)

POLY_ORDER = 7
POS_CONTINUITY = 4
YAW_CONTINUITY = 2
N_COLLOCATION = 16
VERIFY_DENSITY = 10  # verification grid is 10x collocation density

_COLLOCATION_S = chebyshev_lobatto(N_COLLOCATION)


class NoFeasibleScaleError(RuntimeError):
    """No time scaling within the search bracket passes the feasibility oracle."""


@dataclass
class SnapObjectiveWeights:
    """Weights of the position-snap and yaw-acceleration cost terms."""

    mu_r: float = 1.0
    mu_psi: float = 1.0

    def __post_init__(self):
        if self.mu_r <= 0:
            raise ValueError("mu_r must be positive")
        if self.mu_psi < 0:
            raise ValueError("mu_psi must be nonnegative")


class PiecewiseTrajectory(PiecewisePoly):
    """Four-channel (x, y, z, yaw) piecewise polynomial trajectory."""

    def positions(self, ts) -> np.ndarray:
        return self.eval(ts, deriv=0)[:, :3]

    def translated(self, offset: np.ndarray) -> "PiecewiseTrajectory":
        coeffs = self.coeffs.copy()
        coeffs[:, 0, :3] += np.asarray(offset, dtype=float)
        return PiecewiseTrajectory(coeffs=coeffs, knots=self.knots.copy())

    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "knots_s": self.knots.tolist(),
            "coefficients": self.coeffs.tolist(),
            "channels": ["x", "y", "z", "yaw"],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PiecewiseTrajectory":
        return cls(coeffs=np.asarray(data["coefficients"], dtype=float), knots=np.asarray(data["knots_s"], dtype=float))


def _build_qp(
    durations: np.ndarray,
    corridor: list[Polytope] | None,
    start_pose: np.ndarray,
    end_pose: np.ndarray,
    waypoints: list[tuple[int, np.ndarray]],
    weights: SnapObjectiveWeights,
    face_margin=None,
) -> PolyQP:
    """Assemble the minimum-snap QP for one vehicle.

    waypoints is a list of (segment_end_1based, pose4) pins. face_margin,
    when given, is called as face_margin(t, seg) and must return a
    per-face tightening added to the corridor right-hand side (used by
    the formation baseline).
    """
    m = len(durations)
    qp = PolyQP(durations=durations, n_channels=4, order=POLY_ORDER)
    qp.set_cost({0: (4, weights.mu_r), 1: (4, weights.mu_r), 2: (4, weights.mu_r), 3: (2, weights.mu_psi)})

    for ch in range(3):
        qp.add_continuity(ch, POS_CONTINUITY)
    qp.add_continuity(3, YAW_CONTINUITY)

    # rest-to-rest boundary: pose pinned, velocity/acceleration/jerk zero
    for ch in range(4):
        qp.add_point_eq(0, 0.0, 0, ch, float(start_pose[ch]))
        qp.add_point_eq(m - 1, 1.0, 0, ch, float(end_pose[ch]))
    for deriv in (1, 2, 3):
        for ch in range(3):
            qp.add_point_eq(0, 0.0, deriv, ch, 0.0)
            qp.add_point_eq(m - 1, 1.0, deriv, ch, 0.0)
    for deriv in (1, 2):
        qp.add_point_eq(0, 0.0, deriv, 3, 0.0)
        qp.add_point_eq(m - 1, 1.0, deriv, 3, 0.0)

    for seg_end, pose in waypoints:
        if not (1 <= seg_end < m + 1):
            raise ValueError("waypoint segment index out of range")
        for ch in range(4):
            qp.add_point_eq(seg_end - 1, 1.0, 0, ch, float(pose[ch]))

    if corridor is not None:
        knots = np.concatenate([[0.0], np.cumsum(durations)])
        for j, poly in enumerate(corridor):
            for s in _COLLOCATION_S:
                t = knots[j] + s * durations[j]
                rhs = poly.b.copy()
                if face_margin is not None:
                    rhs = rhs + face_margin(t, j)
                for face in range(poly.n_faces):
                    qp.add_combination_ineq(j, s, np.append(poly.A[face], 0.0), float(rhs[face]))
    return qp


def min_snap(
    durations: np.ndarray,
    corridor: list[Polytope] | None,
    start_pose: np.ndarray,
    end_pose: np.ndarray,
    waypoints: list[tuple[int, np.ndarray]] | None = None,
    weights: SnapObjectiveWeights | None = None,
    face_margin=None,
) -> PiecewiseTrajectory:
    """Smoothest trajectory for the given time allocation and constraints.

    Raises QpInfeasibleError when the corridor is too tight for the
    boundary conditions and QpConditioningError on numerical breakdown.
    """
    durations = np.asarray(durations, dtype=float)
    if np.any(durations <= 0):
        raise ValueError("durations must be strictly positive")
    weights = weights or SnapObjectiveWeights()
    qp = _build_qp(durations, corridor, np.asarray(start_pose, float), np.asarray(end_pose, float), waypoints or [], weights, face_margin)
    poly = qp.solve()
    return PiecewiseTrajectory(coeffs=poly.coeffs, knots=poly.knots)


def objective_sigma(traj: PiecewisePoly, weights: SnapObjectiveWeights | None = None) -> float:
    """Exact smoothness cost mu_r * integral ||snap||^2 + mu_psi * integral yaw_accel^2."""
    weights = weights or SnapObjectiveWeights()
    total = 0.0
    for j in range(traj.n_segments):
        dt = traj.knots[j + 1] - traj.knots[j]
        G4 = gram_matrix_local(traj.order, 4, dt)
        G2 = gram_matrix_local(traj.order, 2, dt)
        for ch in range(3):
            c = traj.coeffs[j, :, ch]
            total += weights.mu_r * float(c @ G4 @ c)
        if traj.n_channels > 3:
            c = traj.coeffs[j, :, 3]
            total += weights.mu_psi * float(c @ G2 @ c)
    return total


def corridor_satisfied(
    traj: PiecewiseTrajectory, corridor: list[Polytope], tol: float = 1e-4, density: int = VERIFY_DENSITY
) -> tuple[bool, float]:
    """Check A_j p(t) <= b_j + tol on a dense per-segment grid.

    Returns (ok, worst_violation); worst_violation is max over the grid
    of A p - b (negative when strictly inside everywhere).
    """
    worst = -np.inf
    for j, poly in enumerate(corridor):
        ts = np.linspace(traj.knots[j], traj.knots[j + 1], N_COLLOCATION * density)
        pts = traj.eval(ts)[:, :3]
        viol = (poly.A @ pts.T).T - poly.b[None, :]
        worst = max(worst, float(viol.max()))
    return worst <= tol, worst


def scale_durations(traj_durations: np.ndarray, eta: float) -> np.ndarray:
    return np.asarray(traj_durations, dtype=float) * eta


def initial_allocation(
    durations_total: float,
    corridor: list[Polytope],
    start_pose: np.ndarray,
    end_pose: np.ndarray,
    waypoints: list[tuple[int, np.ndarray]] | None = None,
    weights: SnapObjectiveWeights | None = None,
    sweeps: int = 50,
    rel_tol: float = 1e-6,
    objective=None,
) -> np.ndarray:
    """Distribute a fixed total time over segments to minimize the snap cost.

    Projected coordinate descent on the simplex {x > 0, sum x = T}: each
    coordinate is line-searched in turn and the allocation is rescaled
    back to total T after every update. Runs `sweeps` sweeps or stops
    when the relative objective improvement drops below `rel_tol`.

    An alternative objective(x) -> float may be supplied (the formation
    baseline folds its tightened constraints in this way).
    """
    m = len(corridor)
    T = float(durations_total)

    if objective is None:

        def objective(x: np.ndarray) -> float:
            traj = min_snap(x, corridor, start_pose, end_pose, waypoints, weights)
            return objective_sigma(traj, weights)

    x = np.full(m, T / m)
    if m == 1:
        return x
    best = objective(x)
    floor = 1e-3 * T / m
    for _ in range(sweeps):
        prev = best
        for j in range(m):

            def line_obj(xj: float) -> float:
                cand = x.copy()
                cand[j] = xj
                cand *= T / cand.sum()
                try:
                    return objective(cand)
                except (QpInfeasibleError, QpConditioningError):
                    return np.inf

            res = minimize_scalar(
                line_obj, bounds=(floor, T - (m - 1) * floor), method="bounded", options={"xatol": 1e-4 * T, "maxiter": 25}
            )
            if res.fun < best:
                x[j] = float(res.x)
                x *= T / x.sum()
                best = float(res.fun)
        if prev - best <= rel_tol * max(abs(prev), 1e-12):
            break
    return x


def scale_to_feasible(
    durations: np.ndarray,
    oracle,
    eta_lo: float = 0.01,
    eta_hi: float = 20.0,
    tol: float = 1e-3,
) -> tuple[float, np.ndarray]:
    """Smallest uniform time scaling eta in [eta_lo, eta_hi] passing the oracle.

    oracle(scaled_durations) -> bool is assumed monotone in eta over the
    bracket. Bisection to absolute tolerance `tol`; raises
    NoFeasibleScaleError when even eta_hi fails.
    """
    durations = np.asarray(durations, dtype=float)
    if oracle(durations * eta_lo):
        return eta_lo, durations * eta_lo
    if not oracle(durations * eta_hi):
        raise NoFeasibleScaleError(f"oracle fails even at eta = {eta_hi}")
    lo, hi = eta_lo, eta_hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if oracle(durations * mid):
            hi = mid
        else:
            lo = mid
    return hi, durations * hi


def export_csv(path: str, trajectories: list[PiecewiseTrajectory], rate_hz: float = 100.0) -> None:
    """Write `t,vehicle,x,y,z,yaw` rows sampled at rate_hz, one block per vehicle."""
    with open(path, "w") as fh:
        fh.write("t,vehicle,x,y,z,yaw\n")
        for i, traj in enumerate(trajectories):
            n = int(np.floor(traj.duration * rate_hz)) + 1
            for k in range(n):
                t = k / rate_hz
                row = traj.eval(min(t, traj.duration))[0]
                fh.write(f"{t:.6f},{i},{row[0]:.9g},{row[1]:.9g},{row[2]:.9g},{row[3]:.9g}\n")
