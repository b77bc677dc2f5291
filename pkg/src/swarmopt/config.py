"""Optimizer configuration with defaults for both fidelity setups."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field


@dataclass
class OptimizerConfig:
    """Tuning knobs of the optimization loop.

    Defaults target the single-fidelity setup (200 iterations, batches of
    128). Multi-fidelity runs conventionally use 50 iterations with 64
    low-fidelity / at most 4 high-fidelity evaluations per iteration.
    """

    iters: int = 200
    batch: int = 128
    batch_high: int = 4
    seed: int = 0
    fidelity: str = "low"  # "low" | "multi"

    # acquisition
    h_gate: float = 0.001
    beta: float = 3.0
    cost_low: float = 1.0
    cost_high: float = 10.0
    threshold_init: float = 0.8
    target_acceptance: float = 0.25
    threshold_step: float = 0.01

    # candidate sampling
    n_draw: int = 1024  # N_s
    n_per_vehicle: int = 256  # N_1
    n_candidates: int = 2048  # N_2
    sigma_pert: float = 0.15
    max_join: int = 4096

    # evaluation / oracles
    flatness_dt: float = 0.01
    collision_dt: float = 0.005
    tracking_error_bound: float = 0.05
    corridor_tol: float = 1e-4
    separation_slack: float = 0.01

    # initialization
    init_seconds_per_segment: float = 10.0
    bootstrap_samples: int = 64
    sf_seed_iters: int = 20  # single-fidelity stage length before a multi run

    # surrogate refresh
    hyperopt_every: int = 10
    hyperopt_restarts: int = 5

    # convergence and batch adaptation
    convergence_window: int = 50
    convergence_tol: float = 1e-3
    eval_budget_ms: float = 60_000.0
    eval_cost_ms_low: float = 50.0  # deterministic per-evaluation cost proxy
    eval_cost_ms_high: float = 2000.0
    batch_min: int = 1
    batch_max: int = 256

    # QP / trajectory generation
    mu_r: float = 1.0
    mu_psi: float = 1.0

    jobs: int = 1

    @classmethod
    def from_dict(cls, data: dict) -> "OptimizerConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: str) -> "OptimizerConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kwargs) -> "OptimizerConfig":
        data = self.to_dict()
        data.update(kwargs)
        return OptimizerConfig.from_dict(data)
