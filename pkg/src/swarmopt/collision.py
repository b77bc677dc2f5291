"""Pairwise inter-vehicle separation checks.

Dense time-grid minimum of the centroid distance between two paths; a
path past its own end time holds its final position (vehicles hover at
the goal). Works on planned trajectories and on simulated tracked paths
alike through the eval_held interface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_DT = 0.005


@dataclass
class SampledPath:
    """Uniformly sampled position history with hold-at-end semantics."""

    times: np.ndarray
    positions: np.ndarray  # (n, 3)

    @property
    def duration(self) -> float:
        return float(self.times[-1])

    def eval_held(self, ts: np.ndarray) -> np.ndarray:
        ts = np.clip(np.atleast_1d(np.asarray(ts, dtype=float)), 0.0, self.duration)
        out = np.empty((len(ts), 3))
        for ax in range(3):
            out[:, ax] = np.interp(ts, self.times, self.positions[:, ax])
        return out


def min_separation(path_i, path_j, dt: float = DEFAULT_DT) -> tuple[float, float]:
    """Minimum centroid distance between two paths and the time it occurs.

    Evaluated on the shared grid 0, dt, 2*dt, ... covering the longer
    path; each path holds its final position past its own end.
    """
    horizon = max(path_i.duration, path_j.duration)
    n = int(np.floor(horizon / dt + 1e-9)) + 1
    ts = np.arange(n) * dt
    if ts[-1] < horizon - 1e-12:
        ts = np.append(ts, horizon)
    pi = path_i.eval_held(ts)[:, :3]
    pj = path_j.eval_held(ts)[:, :3]
    dist = np.linalg.norm(pi - pj, axis=1)
    idx = int(np.argmin(dist))
    return float(dist[idx]), float(ts[idx])


def check_pair(path_i, path_j, d_min: float, dt: float = DEFAULT_DT) -> bool:
    """True iff the paths keep at least d_min centroid separation."""
    d_star, _ = min_separation(path_i, path_j, dt)
    return d_star >= d_min
