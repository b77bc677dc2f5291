"""Environment definitions: polytope corridors, poses, formation schedules.

Environments are authored in JSON files (one polytope sequence per
vehicle, start/end poses, a formation waypoint schedule and vehicle
parameters) and validated on load. All quantities are SI: meters,
radians, seconds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .flatness import ControllerGains, QuadParams

INTERIOR_EPS = 1e-9
WAYPOINT_SLACK = 1e-9


class EnvironmentError_(ValueError):
    """Base class for environment file problems."""


class ParseError(EnvironmentError_):
    """File missing, malformed, or not matching the documented schema."""


class ValidationError(EnvironmentError_):
    """A structural invariant is violated; message names invariant and index."""


class EmptyPolytopeError(ValueError):
    """Polytope has no interior (or is unbounded where boundedness is required)."""


@dataclass
class Polytope:
    """Convex region {r : A r <= b} with unit-norm face normals.

    passage_mask[i] is 1 on faces that are true obstacle boundaries and 0
    on faces the trajectory passes through (used by the formation baseline
    to tighten obstacle faces only).
    """

    A: np.ndarray
    b: np.ndarray
    passage_mask: np.ndarray

    @property
    def n_faces(self) -> int:
        return self.A.shape[0]

    def contains(self, r: np.ndarray, slack: float = 0.0) -> bool:
        return bool(np.all(self.A @ np.asarray(r, dtype=float) <= self.b + slack))

    def margins(self, r: np.ndarray) -> np.ndarray:
        """Per-face slack b - A r (negative entries are violations)."""
        return self.b - self.A @ np.asarray(r, dtype=float)


def normalize_polytope(A: np.ndarray, b: np.ndarray, passage_mask: np.ndarray) -> Polytope:
    """Scale each face to a unit normal; the feasible set is unchanged."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    norms = np.linalg.norm(A, axis=1)
    if np.any(norms < 1e-12):
        raise ValidationError("polytope face with zero normal")
    return Polytope(A / norms[:, None], b / norms, np.asarray(passage_mask, dtype=int))


def chebyshev_center(A: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, float]:
    """Center and radius of the largest inscribed ball of {A r <= b}.

    Solved as the LP  max rho  s.t.  A r + rho ||a_i|| <= b. Raises
    EmptyPolytopeError when the region is empty or the LP is unbounded.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    norms = np.linalg.norm(A, axis=1)
    c = np.zeros(A.shape[1] + 1)
    c[-1] = -1.0
    A_ub = np.hstack([A, norms[:, None]])
    res = linprog(c, A_ub=A_ub, b_ub=b, bounds=[(None, None)] * A.shape[1] + [(0, None)], method="highs")
    if res.status == 3:
        raise EmptyPolytopeError("chebyshev LP unbounded (polytope has unbounded inradius)")
    if not res.success:
        raise EmptyPolytopeError("polytope is empty")
    return res.x[:-1], float(res.x[-1])


def interior_point(P: Polytope) -> np.ndarray:
    """Deterministic interior point (Chebyshev center) with A r <= b - 1e-9."""
    center, radius = chebyshev_center(P.A, P.b)
    if radius <= INTERIOR_EPS:
        raise EmptyPolytopeError("polytope has empty interior")
    return center


def is_bounded(P: Polytope) -> bool:
    """Bounded iff every coordinate direction has a finite support value."""
    for axis in range(3):
        for sign in (1.0, -1.0):
            c = np.zeros(3)
            c[axis] = -sign
            res = linprog(c, A_ub=P.A, b_ub=P.b, bounds=[(None, None)] * 3, method="highs")
            if res.status == 3:
                return False
            if not res.success:
                raise EmptyPolytopeError("polytope is empty")
    return True


@dataclass
class FormationSchedule:
    """Formation waypoint schedule shared by all vehicles.

    segment_ends[k] is the 1-based index of the trajectory segment that
    ends at formation waypoint k. waypoints[i][k] is the (x, y, z, yaw)
    pose of vehicle i at formation k. scale_bounds / yaw_refs carry the
    N_f + 2 formation radii and yaw angles (start, formations, end) used
    by the formation-control baseline. offsets optionally pins each
    vehicle's position in the formation pattern; default is a regular
    polygon of radius max(scale_bounds).
    """

    segment_ends: list[int]
    waypoints: np.ndarray  # (n_vehicles, n_formations, 4)
    scale_bounds: np.ndarray  # (n_formations + 2,)
    yaw_refs: np.ndarray  # (n_formations + 2,)
    offsets: np.ndarray | None = None

    @property
    def n_formations(self) -> int:
        return len(self.segment_ends)

    def interval_bounds(self, n_segments: int) -> list[tuple[int, int]]:
        """Half-open 0-based segment ranges between consecutive sync events."""
        edges = [0] + [e for e in self.segment_ends] + [n_segments]
        return [(edges[k], edges[k + 1]) for k in range(len(edges) - 1)]

    def interval_sums(self, durations: np.ndarray) -> np.ndarray:
        """Per-interval duration sums for one vehicle's segment durations."""
        bounds = self.interval_bounds(len(durations))
        return np.array([durations[a:b].sum() for a, b in bounds])


@dataclass
class Environment:
    """Validated multi-vehicle planning instance. Immutable after load."""

    n_vehicles: int
    corridors: list[list[Polytope]]  # [vehicle][segment]
    starts: np.ndarray  # (n_vehicles, 4) x, y, z, yaw
    ends: np.ndarray
    formation: FormationSchedule
    d_min: float
    quad_params: QuadParams
    gains: ControllerGains = field(default_factory=ControllerGains)

    @property
    def n_segments(self) -> int:
        return len(self.corridors[0])


def _require(data: dict, key: str) -> object:
    if key not in data:
        raise ParseError(f"missing required key '{key}'")
    return data[key]


def _parse_formation(data: dict | None, n_vehicles: int) -> FormationSchedule:
    if data is None:
        data = {}
    ends = [int(e) for e in data.get("segment_indices", [])]
    n_f = len(ends)
    wps = np.asarray(data.get("waypoints", [[] for _ in range(n_vehicles)]), dtype=float)
    wps = wps.reshape(n_vehicles, n_f, 4)
    scale = np.asarray(data.get("scale_bounds_m", [1.0] * (n_f + 2)), dtype=float)
    yaw = np.asarray(data.get("yaw_refs_rad", [0.0] * (n_f + 2)), dtype=float)
    offsets = data.get("offsets_m")
    if offsets is not None:
        offsets = np.asarray(offsets, dtype=float).reshape(n_vehicles, 3)
    if scale.shape != (n_f + 2,):
        raise ParseError("scale_bounds_m must have one entry per formation plus start and end")
    if yaw.shape != (n_f + 2,):
        raise ParseError("yaw_refs_rad must have one entry per formation plus start and end")
    return FormationSchedule(ends, wps, scale, yaw, offsets)


def validate_environment(env: Environment) -> None:
    """Check all structural invariants; raises ValidationError naming the first failure."""
    m = env.n_segments
    if env.n_vehicles < 1:
        raise ValidationError("vehicles must be >= 1")
    for i, corridor in enumerate(env.corridors):
        if len(corridor) != m:
            raise ValidationError(f"corridor of vehicle {i} has {len(corridor)} segments, expected {m}")
        for j, P in enumerate(corridor):
            if P.n_faces < 4:
                raise ValidationError(f"polytope {j} of vehicle {i} has fewer than 4 faces")
            interior_point(P)  # nonempty
            if not is_bounded(P):
                raise ValidationError(f"polytope {j} of vehicle {i} is unbounded")
        for j in range(m - 1):
            A = np.vstack([corridor[j].A, corridor[j + 1].A])
            b = np.concatenate([corridor[j].b, corridor[j + 1].b])
            try:
                _, radius = chebyshev_center(A, b)
            except EmptyPolytopeError:
                radius = -1.0
            if radius <= INTERIOR_EPS:
                raise ValidationError(
                    f"consecutive polytopes {j} and {j + 1} of vehicle {i} do not intersect"
                )
        if not corridor[0].contains(env.starts[i, :3], WAYPOINT_SLACK):
            raise ValidationError(f"start pose of vehicle {i} outside first polytope")
        if not corridor[-1].contains(env.ends[i, :3], WAYPOINT_SLACK):
            raise ValidationError(f"end pose of vehicle {i} outside last polytope")

    sched = env.formation
    for k, e in enumerate(sched.segment_ends):
        if not (1 <= e < m):
            raise ValidationError(f"formation segment index {e} (waypoint {k}) outside [1, m)")
        if k and e <= sched.segment_ends[k - 1]:
            raise ValidationError("formation segment indices must be strictly increasing")
    for i in range(env.n_vehicles):
        for k, e in enumerate(sched.segment_ends):
            p = sched.waypoints[i, k, :3]
            if not env.corridors[i][e - 1].contains(p, WAYPOINT_SLACK):
                raise ValidationError(f"waypoint outside polytope: vehicle {i}, formation {k}")
    for k in range(sched.n_formations):
        pts = sched.waypoints[:, k, :3]
        for i in range(env.n_vehicles):
            for j in range(i + 1, env.n_vehicles):
                d = float(np.linalg.norm(pts[i] - pts[j]))
                if d < env.d_min:
                    raise ValidationError(
                        f"formation {k} waypoints of vehicles {i} and {j} closer than d_min"
                    )
    if np.any(sched.scale_bounds <= 0):
        raise ValidationError("formation scale bounds must be positive")


def environment_from_dict(data: dict) -> Environment:
    """Build and validate an Environment from parsed JSON data."""
    n_vehicles = int(_require(data, "vehicles"))
    d_min = float(_require(data, "d_min_m"))
    corridors_raw = _require(data, "corridors")
    if len(corridors_raw) != n_vehicles:
        raise ParseError("corridors must list one polytope sequence per vehicle")
    corridors = []
    for i, seq in enumerate(corridors_raw):
        corridor = []
        for j, poly in enumerate(seq):
            try:
                corridor.append(
                    normalize_polytope(poly["A"], poly["b"], poly.get("passage_mask", [1] * len(poly["b"])))
                )
            except (KeyError, TypeError) as exc:
                raise ParseError(f"malformed polytope {j} of vehicle {i}: {exc}") from exc
        corridors.append(corridor)
    starts = np.asarray(_require(data, "starts"), dtype=float).reshape(n_vehicles, 4)
    ends = np.asarray(_require(data, "ends"), dtype=float).reshape(n_vehicles, 4)
    formation = _parse_formation(data.get("formation"), n_vehicles)
    quad = QuadParams.from_dict(data.get("quad_params", {}))
    gains = ControllerGains.from_dict(data.get("controller", {}))
    env = Environment(
        n_vehicles=n_vehicles,
        corridors=corridors,
        starts=starts,
        ends=ends,
        formation=formation,
        d_min=d_min,
        quad_params=quad,
        gains=gains,
    )
    validate_environment(env)
    return env


def load_environment(path: str) -> Environment:
    """Load and validate an environment file. Deterministic in the file bytes."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ParseError(f"environment file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"environment file is not valid JSON: {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ParseError("environment file must contain a JSON object")
    return environment_from_dict(data)
