"""Top-level optimization loop.

Initialization (per-vehicle smoothest allocation, synchronization
rescale, uniform slow-down), dataset bootstrap, then the iterate:
build candidates, select a batch by the acquisition, evaluate at the
chosen fidelity, grow the per-module datasets and refit. The incumbent
moves only on ground-truth-feasible evaluations at the run's governing
fidelity; predictions never move it.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .acquisition import (
    CandidateSet,
    RejectionThresholds,
    _rescale_to_intervals,
    _smooth_rows,
    build_candidates,
    select_next,
)
from .collision import check_pair
from .config import OptimizerConfig
from .flatness import check_feasible_low
from .geometry import Environment
from .hifisim import check_feasible_high
from .polyqp import QpConditioningError, QpInfeasibleError
from .polytraj import (
    PiecewiseTrajectory,
    SnapObjectiveWeights,
    corridor_satisfied,
    initial_allocation,
    min_snap,
    scale_to_feasible,
)
from .surrogate import LEVEL_HIGH, LEVEL_LOW, Dataset, ModularSurrogate, Normalizer, pair_keys

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["iter", "best_makespan_s", "accept_rate_c1", "accept_rate_c2", "batch", "level", "wall_ms"]
LEVEL_CODE = {LEVEL_LOW: 1, LEVEL_HIGH: 2}


class NoFeasibleSolutionError(RuntimeError):
    """Raised by initialization when no time scaling is dynamically feasible."""


@dataclass
class EvaluationRecord:
    """Ground-truth labels of one allocation at one fidelity level."""

    level: str
    allocation: np.ndarray  # (n_vehicles, n_segments)
    vehicle_labels: np.ndarray  # (n_vehicles,) in {0, 1}
    pair_labels: dict  # (i, j) -> {0, 1}
    makespan: float
    diagnostics: str = ""

    @property
    def feasible(self) -> bool:
        return bool(np.all(self.vehicle_labels == 1) and all(v == 1 for v in self.pair_labels.values()))


@dataclass
class OptimizerState:
    """Mutable state owned by the single optimization thread."""

    env: Environment
    config: OptimizerConfig
    normalizer: Normalizer
    surrogate: ModularSurrogate
    dataset: Dataset
    thresholds: RejectionThresholds
    rng: np.random.Generator
    x_ref: np.ndarray  # acquisition reference allocation (seeds the incumbent)
    best_allocation: np.ndarray | None = None
    best_makespan: float = float("nan")
    iteration: int = 0
    batch: int = 0
    trace: list = field(default_factory=list)
    last_c1_rate: float = float("nan")
    last_c2_rate: float = float("nan")
    last_improvement_iter: int = 0
    best_predicted: np.ndarray | None = None


@dataclass
class RunResult:
    feasible: bool
    makespan: float
    allocations: np.ndarray | None
    trajectories: list | None
    trace: list
    state: OptimizerState
    best_predicted: np.ndarray | None = None


def vehicle_waypoints(env: Environment, i: int) -> list[tuple[int, np.ndarray]]:
    sched = env.formation
    return [(e, sched.waypoints[i, k]) for k, e in enumerate(sched.segment_ends)]


def build_trajectory(env: Environment, i: int, durations: np.ndarray, config: OptimizerConfig) -> PiecewiseTrajectory:
    weights = SnapObjectiveWeights(config.mu_r, config.mu_psi)
    return min_snap(durations, env.corridors[i], env.starts[i], env.ends[i], vehicle_waypoints(env, i), weights)


def vehicle_low_ok(env: Environment, i: int, durations: np.ndarray, config: OptimizerConfig) -> bool:
    """Flatness admissibility plus dense-grid corridor verification."""
    try:
        traj = build_trajectory(env, i, durations, config)
    except (QpInfeasibleError, QpConditioningError):
        return False
    if not corridor_satisfied(traj, env.corridors[i], config.corridor_tol)[0]:
        return False
    return check_feasible_low(traj, env.quad_params, config.flatness_dt)


def equalize_interval_sums(x: np.ndarray, bounds: list[tuple[int, int]]) -> np.ndarray:
    """Rescale each vehicle's durations so per-interval sums equal the fleet mean.

    The per-segment structure within an interval is preserved; for a
    single vehicle this is the identity.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = x.copy()
    for a, b in bounds:
        sums = x[:, a:b].sum(axis=1)
        mean = sums.mean()
        out[:, a:b] = x[:, a:b] * (mean / sums)[:, None]
    return out


def synchronized_perturbation(
    x: np.ndarray, bounds: list[tuple[int, int]], rng: np.random.Generator, sigma: float
) -> np.ndarray:
    """Log-normal smooth perturbation of a synchronized allocation.

    The shared interval durations are perturbed once and every vehicle is
    rescaled to them, so the result is synchronization-exact.
    """
    x = np.atleast_2d(x)
    intervals = np.array([x[0][a:b].sum() for a, b in bounds])
    x_f = intervals * np.exp(rng.normal(0.0, sigma, size=len(intervals)))
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        eta = _smooth_rows(rng.normal(0.0, sigma, size=(1, x.shape[1])))
        out[i] = _rescale_to_intervals(x[i : i + 1] * np.exp(eta), bounds, x_f)[0]
    return out


def initialize(env: Environment, config: OptimizerConfig) -> np.ndarray:
    """Initial synchronized allocation: smoothest per-vehicle allocations,
    scaled to dynamic feasibility, interval sums equalized across the
    fleet, then uniformly slowed until every vehicle passes the flatness
    and corridor checks again. Pairwise feasibility is not enforced."""
    m = env.n_segments
    bounds = env.formation.interval_bounds(m)
    weights = SnapObjectiveWeights(config.mu_r, config.mu_psi)
    rows = []
    for i in range(env.n_vehicles):
        x0 = initial_allocation(
            config.init_seconds_per_segment * m,
            env.corridors[i],
            env.starts[i],
            env.ends[i],
            vehicle_waypoints(env, i),
            weights,
        )
        _, scaled = scale_to_feasible(x0, lambda d, i=i: vehicle_low_ok(env, i, d, config))
        rows.append(scaled)
    x = equalize_interval_sums(np.vstack(rows), bounds)

    def all_ok(joint_scale_row: np.ndarray) -> bool:
        eta = joint_scale_row[0]
        return all(vehicle_low_ok(env, i, x[i] * eta, config) for i in range(env.n_vehicles))

    eta, _ = scale_to_feasible(np.array([1.0]), all_ok, eta_lo=1.0, eta_hi=20.0)
    return x * eta


def _eval_one_low(env: Environment, config: OptimizerConfig, x: np.ndarray) -> EvaluationRecord:
    n_v = env.n_vehicles
    labels = np.zeros(n_v, dtype=int)
    trajs: list[PiecewiseTrajectory | None] = [None] * n_v
    diag = ""
    for i in range(n_v):
        try:
            trajs[i] = build_trajectory(env, i, x[i], config)
        except (QpInfeasibleError, QpConditioningError) as exc:
            diag = f"vehicle {i}: {exc}"
            break
    if any(t is None for t in trajs):
        return EvaluationRecord(LEVEL_LOW, x.copy(), labels, {k: 0 for k in pair_keys(n_v)}, float(x.sum(axis=1).max()), diag)
    for i in range(n_v):
        ok = corridor_satisfied(trajs[i], env.corridors[i], config.corridor_tol)[0]
        ok = ok and check_feasible_low(trajs[i], env.quad_params, config.flatness_dt)
        labels[i] = int(ok)
    pair_labels = {}
    for i, j in pair_keys(n_v):
        pair_labels[(i, j)] = int(check_pair(trajs[i], trajs[j], env.d_min, config.collision_dt))
    return EvaluationRecord(LEVEL_LOW, x.copy(), labels, pair_labels, float(x.sum(axis=1).max()))


def _eval_one_high(env: Environment, config: OptimizerConfig, x: np.ndarray) -> EvaluationRecord:
    n_v = env.n_vehicles
    labels = np.zeros(n_v, dtype=int)
    tracked = [None] * n_v
    diag = ""
    for i in range(n_v):
        try:
            traj = build_trajectory(env, i, x[i], config)
        except (QpInfeasibleError, QpConditioningError) as exc:
            return EvaluationRecord(
                LEVEL_HIGH, x.copy(), labels, {k: 0 for k in pair_keys(n_v)}, float(x.sum(axis=1).max()),
                f"vehicle {i}: {exc}",
            )
        if not corridor_satisfied(traj, env.corridors[i], config.corridor_tol)[0]:
            labels[i] = 0
            _, tracked[i] = check_feasible_high(traj, env.quad_params, env.gains, config.tracking_error_bound)
            continue
        ok, tracked[i] = check_feasible_high(traj, env.quad_params, env.gains, config.tracking_error_bound)
        labels[i] = int(ok)
    pair_labels = {}
    for i, j in pair_keys(n_v):
        pair_labels[(i, j)] = int(check_pair(tracked[i], tracked[j], env.d_min, config.collision_dt))
    return EvaluationRecord(LEVEL_HIGH, x.copy(), labels, pair_labels, float(x.sum(axis=1).max()))


def evaluate(x: np.ndarray, level: str, env: Environment, config: OptimizerConfig) -> EvaluationRecord:
    """Ground-truth evaluation of one synchronized allocation.

    Low fidelity labels each vehicle by flatness admissibility plus the
    corridor grid check and pairs on planned trajectories; high fidelity
    labels vehicles by closed-loop tracking error and pairs on the
    simulated (tracked) paths. Trajectory-generation failures label
    everything infeasible but the record is still produced.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if level == LEVEL_LOW:
        return _eval_one_low(env, config, x)
    return _eval_one_high(env, config, x)


def _record_to_dataset(dataset: Dataset, normalizer: Normalizer, rec: EvaluationRecord):
    for i in range(len(rec.vehicle_labels)):
        dataset.add_vehicle(rec.level, i, normalizer.vehicle(i, rec.allocation[i]), int(rec.vehicle_labels[i]))
    for (i, j), label in rec.pair_labels.items():
        dataset.add_pair(rec.level, (i, j), normalizer.pair(i, j, rec.allocation[i], rec.allocation[j]), int(label))


def _evaluate_batch(
    env: Environment, config: OptimizerConfig, allocations: list[np.ndarray], level: str
) -> list[EvaluationRecord]:
    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            return list(pool.map(lambda x: evaluate(x, level, env, config), allocations))
    return [evaluate(x, level, env, config) for x in allocations]


def _required_level(config: OptimizerConfig) -> str:
    return LEVEL_HIGH if config.fidelity == "multi" else LEVEL_LOW


def _maybe_update_incumbent(state: OptimizerState, rec: EvaluationRecord, required_level: str):
    if rec.level != required_level or not rec.feasible:
        return
    if not np.isfinite(state.best_makespan) or rec.makespan < state.best_makespan - 1e-12:
        improved = not np.isfinite(state.best_makespan) or rec.makespan < state.best_makespan - state.config.convergence_tol
        state.best_allocation = rec.allocation.copy()
        state.best_makespan = rec.makespan
        state.x_ref = rec.allocation.copy()
        if improved:
            state.last_improvement_iter = state.iteration


def _trace_row(state: OptimizerState, batch: int, level: str, wall_ms: float):
    state.trace.append(
        {
            "iter": state.iteration,
            "best_makespan_s": state.best_makespan,
            "accept_rate_c1": state.last_c1_rate,
            "accept_rate_c2": state.last_c2_rate,
            "batch": batch,
            "level": LEVEL_CODE[level],
            "wall_ms": wall_ms,
        }
    )


def write_trace_csv(path: str, trace: list) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        for row in trace:
            fh.write(
                f"{row['iter']},{row['best_makespan_s']:.9g},{row['accept_rate_c1']:.9g},"
                f"{row['accept_rate_c2']:.9g},{row['batch']},{row['level']},{row['wall_ms']:.9g}\n"
            )


def _bootstrap(state: OptimizerState):
    """Seed the low-fidelity dataset with labeled samples around the start."""
    env, config = state.env, state.config
    bounds = env.formation.interval_bounds(env.n_segments)
    samples = [state.x_ref.copy()]
    for _ in range(config.bootstrap_samples - 1):
        samples.append(synchronized_perturbation(state.x_ref, bounds, state.rng, config.sigma_pert))
    records = _evaluate_batch(env, config, samples, LEVEL_LOW)
    required = _required_level(config)
    for rec in records:
        _record_to_dataset(state.dataset, state.normalizer, rec)
        _maybe_update_incumbent(state, rec, required)


def _iterate(state: OptimizerState, levels: tuple[str, ...]):
    env, config = state.env, state.config
    bounds = env.formation.interval_bounds(env.n_segments)
    state.thresholds.adapt(state.last_c1_rate, state.last_c2_rate)

    candidates = build_candidates(
        bounds,
        state.surrogate,
        state.thresholds,
        state.normalizer,
        state.x_ref,
        state.rng,
        n_draw=config.n_draw,
        n_per_vehicle=config.n_per_vehicle,
        n_candidates=config.n_candidates,
        sigma_pert=config.sigma_pert,
        max_join=config.max_join,
        levels=levels,
        beta=config.beta,
    )
    state.last_c1_rate = candidates.accept_rate_c1
    state.last_c2_rate = candidates.accept_rate_c2
    _track_best_predicted(state, candidates, levels[-1])

    cost_weights = {LEVEL_LOW: config.cost_low, LEVEL_HIGH: config.cost_high}
    selected = select_next(
        candidates, state.surrogate, state.x_ref, max(state.batch, 1), cost_weights,
        config.beta, config.h_gate, levels,
    )
    if not selected:
        _trace_row(state, 0, LEVEL_LOW, 0.0)
        return
    level = selected[0][1]
    batch_cap = state.batch if level == LEVEL_LOW else min(config.batch_high, state.batch)
    picks = [idx for idx, lvl, _ in selected if lvl == level][: max(batch_cap, 1)]
    allocations = [candidates.allocations[idx] for idx in picks]

    records = _evaluate_batch(env, config, allocations, level)
    required = _required_level(config)
    for rec in records:
        _record_to_dataset(state.dataset, state.normalizer, rec)
        _maybe_update_incumbent(state, rec, required)

    optimize_hp = state.iteration % config.hyperopt_every == 0
    state.surrogate.refit(state.dataset, optimize_hyperparams=optimize_hp, restarts=config.hyperopt_restarts)

    cost_ms = config.eval_cost_ms_low if level == LEVEL_LOW else config.eval_cost_ms_high
    wall_ms = len(records) * cost_ms
    _trace_row(state, len(records), level, wall_ms)
    if wall_ms > config.eval_budget_ms:
        state.batch = max(config.batch_min, state.batch // 2)
    else:
        state.batch = min(config.batch_max, config.batch, state.batch * 2)


def _track_best_predicted(state: OptimizerState, candidates: CandidateSet, level: str):
    joint = np.ones(len(candidates))
    for i in range(state.env.n_vehicles):
        joint *= candidates.plain_probability(level, i)
    for key in pair_keys(state.env.n_vehicles):
        joint *= candidates.plain_probability(level, key)
    state.best_predicted = candidates.allocations[int(np.argmax(joint))].copy()


def _converged(state: OptimizerState) -> bool:
    window = state.config.convergence_window
    return state.iteration - state.last_improvement_iter >= window


def _make_state(env: Environment, config: OptimizerConfig, x_init: np.ndarray, levels: tuple[str, ...]) -> OptimizerState:
    surrogate = ModularSurrogate(
        n_vehicles=env.n_vehicles,
        n_segments=env.n_segments,
        levels=levels,
        cost_weights={LEVEL_LOW: config.cost_low, LEVEL_HIGH: config.cost_high},
    )
    return OptimizerState(
        env=env,
        config=config,
        normalizer=Normalizer(x_init),
        surrogate=surrogate,
        dataset=Dataset(n_vehicles=env.n_vehicles, n_segments=env.n_segments),
        thresholds=RejectionThresholds(
            c1=config.threshold_init,
            c2=config.threshold_init,
            target_acceptance=config.target_acceptance,
            step=config.threshold_step,
        ),
        rng=np.random.default_rng(config.seed),
        x_ref=x_init.copy(),
        batch=config.batch,
    )


def _finalize(state: OptimizerState) -> RunResult:
    env, config = state.env, state.config
    if state.best_allocation is None:
        logger.warning("no ground-truth-feasible solution found; reporting best predicted candidate")
        return RunResult(
            feasible=False,
            makespan=float("nan"),
            allocations=None,
            trajectories=None,
            trace=state.trace,
            state=state,
            best_predicted=state.best_predicted,
        )
    trajs = [build_trajectory(env, i, state.best_allocation[i], config) for i in range(env.n_vehicles)]
    return RunResult(
        feasible=True,
        makespan=state.best_makespan,
        allocations=state.best_allocation,
        trajectories=trajs,
        trace=state.trace,
        state=state,
        best_predicted=state.best_predicted,
    )


def run_single_fidelity(env: Environment, config: OptimizerConfig, x_init: np.ndarray | None = None) -> RunResult:
    if x_init is None:
        x_init = initialize(env, config)
    state = _make_state(env, config, x_init, (LEVEL_LOW,))
    _bootstrap(state)
    state.surrogate.refit(state.dataset, optimize_hyperparams=True, restarts=config.hyperopt_restarts)
    for it in range(config.iters):
        state.iteration = it + 1
        _iterate(state, (LEVEL_LOW,))
        if _converged(state):
            logger.info("converged after %d iterations", state.iteration)
            break
    return _finalize(state)


def run_multi_fidelity(env: Environment, config: OptimizerConfig) -> RunResult:
    """Multi-fidelity run: a single-fidelity stage seeds the low dataset,
    its solution is slowed until it passes the full high-fidelity check,
    and the main loop then selects between both levels."""
    sf_config = config.replace(fidelity="low", iters=config.sf_seed_iters)
    sf_result = run_single_fidelity(env, sf_config)
    x_start = sf_result.allocations if sf_result.feasible else sf_result.state.x_ref

    def high_ok(scale_row: np.ndarray) -> bool:
        return evaluate(x_start * scale_row[0], LEVEL_HIGH, env, config).feasible

    eta, _ = scale_to_feasible(np.array([1.0]), high_ok, eta_lo=1.0, eta_hi=20.0)
    x_mf = x_start * eta

    state = _make_state(env, config, sf_result.state.normalizer.base, (LEVEL_LOW, LEVEL_HIGH))
    # seed the low-fidelity dataset and reference from the first stage
    state.dataset = sf_result.state.dataset
    state.x_ref = x_mf.copy()
    rec = evaluate(x_mf, LEVEL_HIGH, env, config)
    _record_to_dataset(state.dataset, state.normalizer, rec)
    _maybe_update_incumbent(state, rec, LEVEL_HIGH)
    state.surrogate.refit(state.dataset, optimize_hyperparams=True, restarts=config.hyperopt_restarts)
    for it in range(config.iters):
        state.iteration = it + 1
        _iterate(state, (LEVEL_LOW, LEVEL_HIGH))
        if _converged(state):
            logger.info("converged after %d iterations", state.iteration)
            break
    return _finalize(state)


def run(env: Environment, config: OptimizerConfig) -> RunResult:
    """Entry point dispatching on config.fidelity ("low" or "multi")."""
    if config.fidelity == "multi":
        return run_multi_fidelity(env, config)
    return run_single_fidelity(env, config)
