"""swarmopt: time-optimal multi-quadrotor trajectories through polytope corridors."""

__version__ = "0.1.0"
