"""Candidate sampling and acquisition functions.

Joint multi-vehicle candidates are generated by rejection sampling:
per-round a random allocation of time between formation waypoints is
drawn, each vehicle's perturbed allocations are rescaled so their
per-interval sums match it exactly (synchronization holds by
construction), low-probability candidates are dropped against the
per-vehicle modules, and joins between vehicles are filtered by the
pairwise modules. The surviving set is scored by the exploit acquisition
(deterministic makespan improvement times the variance-penalized
feasibility probability, gated) falling back to the exploration score
(negative scaled distance to the decision boundaries) when no candidate
exploits.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .surrogate import LEVEL_HIGH, LEVEL_LOW, ModularSurrogate, Normalizer, pair_keys, variance_penalized_prob

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-9
STARVATION_ROUNDS = 50
MAX_ROUNDS = 400


@dataclass
class RejectionThresholds:
    """Adaptive probability cutoffs of the candidate rejection steps."""

    c1: float = 0.8
    c2: float = 0.8
    target_acceptance: float = 0.25
    step: float = 0.01
    lo: float = 1e-4
    hi: float = 0.999
    warnings: list = field(default_factory=list)

    def _clip(self, value: float) -> float:
        return float(np.clip(value, self.lo, self.hi))

    def adapt(self, rate_c1: float | None, rate_c2: float | None):
        """Move each threshold by one step toward the target acceptance rate."""
        if rate_c1 is not None and not np.isnan(rate_c1):
            if rate_c1 < self.target_acceptance:
                self.c1 = self._clip(self.c1 * (1.0 - self.step))
            elif rate_c1 > self.target_acceptance:
                self.c1 = self._clip(self.c1 * (1.0 + self.step))
        if rate_c2 is not None and not np.isnan(rate_c2):
            if rate_c2 < self.target_acceptance:
                self.c2 = self._clip(self.c2 * (1.0 - self.step))
            elif rate_c2 > self.target_acceptance:
                self.c2 = self._clip(self.c2 * (1.0 + self.step))

    def halve_c1(self, reason: str):
        self.c1 = self._clip(self.c1 / 2.0)
        self.warnings.append(reason)
        logger.warning(reason)

    def halve_c2(self, reason: str):
        self.c2 = self._clip(self.c2 / 2.0)
        self.warnings.append(reason)
        logger.warning(reason)


@dataclass
class CandidateSet:
    """Joint candidates with cached per-module latent statistics."""

    allocations: np.ndarray  # (n, n_vehicles, n_segments)
    interval_sums: np.ndarray  # (n, n_intervals), shared across vehicles
    vehicle_stats: dict = field(default_factory=dict)  # (level, i) -> (mu, sigma)
    pair_stats: dict = field(default_factory=dict)  # (level, (i,j)) -> (mu, sigma)
    accept_rate_c1: float = float("nan")
    accept_rate_c2: float = float("nan")

    def __len__(self) -> int:
        return len(self.allocations)

    def makespans(self) -> np.ndarray:
        return self.allocations.sum(axis=2).max(axis=1)

    def plain_probability(self, level: str, key) -> np.ndarray:
        from scipy.special import ndtr

        stats = self.vehicle_stats if not isinstance(key, tuple) else self.pair_stats
        mu, sigma = stats[(level, key)]
        return ndtr(mu / np.sqrt(1.0 + sigma**2))

    def penalized_probability(self, level: str, key, beta: float) -> np.ndarray:
        stats = self.vehicle_stats if not isinstance(key, tuple) else self.pair_stats
        mu, sigma = stats[(level, key)]
        return variance_penalized_prob(mu, sigma, beta)


def _smooth_rows(z: np.ndarray) -> np.ndarray:
    """One centered moving-average pass (window 3, edges replicated)."""
    if z.shape[1] < 3:
        return z
    padded = np.pad(z, ((0, 0), (1, 1)), mode="edge")
    return (padded[:, :-2] + padded[:, 1:-1] + padded[:, 2:]) / 3.0


def _rescale_to_intervals(alloc: np.ndarray, bounds: list[tuple[int, int]], x_f: np.ndarray) -> np.ndarray:
    """Scale each formation interval so its duration sum matches x_f exactly."""
    out = alloc.copy()
    for k, (a, b) in enumerate(bounds):
        sums = out[:, a:b].sum(axis=1, keepdims=True)
        out[:, a:b] *= x_f[k] / sums
    return out


def sample_traj(
    vehicle: int,
    x_f: np.ndarray,
    surrogate: ModularSurrogate,
    thresholds: RejectionThresholds,
    normalizer: Normalizer,
    incumbent: np.ndarray,
    bounds: list[tuple[int, int]],
    rng: np.random.Generator,
    n_target: int,
    n_draw: int,
    sigma_pert: float,
    level: str = LEVEL_LOW,
    max_rounds: int = MAX_ROUNDS,
) -> tuple[np.ndarray, int, int]:
    """Per-vehicle candidate allocations whose interval sums match x_f.

    Draws log-normal perturbations around the vehicle's normalized
    incumbent allocation, smooths them along the segment axis, rescales
    to the shared interval allocation and keeps rows the vehicle module
    rates at least c1-probable. Returns (survivors (k, m), drawn, kept);
    50 consecutive empty rounds halve c1 and record a warning.
    """
    incumbent_norm = normalizer.vehicle(vehicle, incumbent)
    survivors: list[np.ndarray] = []
    drawn = kept = 0
    empty_rounds = 0
    for _ in range(max_rounds):
        if sum(len(s) for s in survivors) >= n_target:
            break
        eta = _smooth_rows(rng.normal(0.0, sigma_pert, size=(n_draw, len(incumbent))))
        cand_norm = incumbent_norm[None, :] * np.exp(eta)
        cand = normalizer.vehicle_inverse(vehicle, cand_norm)
        cand = _rescale_to_intervals(cand, bounds, x_f)
        z = cand / normalizer.base[vehicle][None, :]
        _, _, probs = surrogate.predict_level(vehicle, z, level)
        keep = probs >= thresholds.c1
        drawn += n_draw
        kept += int(keep.sum())
        if not keep.any():
            empty_rounds += 1
            if empty_rounds >= STARVATION_ROUNDS:
                thresholds.halve_c1(
                    f"vehicle {vehicle} sampler starved after {STARVATION_ROUNDS} rounds; halving c1 to {thresholds.c1 / 2:.4g}"
                )
                empty_rounds = 0
            continue
        empty_rounds = 0
        survivors.append(cand[keep])
    if not survivors:
        return np.zeros((0, len(incumbent))), drawn, kept
    out = np.vstack(survivors)[:n_target]
    return out, drawn, kept


def build_candidates(
    schedule_bounds: list[tuple[int, int]],
    surrogate: ModularSurrogate,
    thresholds: RejectionThresholds,
    normalizer: Normalizer,
    incumbent: np.ndarray,
    rng: np.random.Generator,
    n_draw: int = 1024,
    n_per_vehicle: int = 256,
    n_candidates: int = 2048,
    sigma_pert: float = 0.15,
    max_join: int = 4096,
    filter_level: str = LEVEL_LOW,
    levels: tuple[str, ...] = (LEVEL_LOW,),
    beta: float = 3.0,
) -> CandidateSet:
    """Joint candidate set of at least n_candidates allocations.

    Per round one interval allocation is drawn and shared by all
    vehicles; vehicle survivor lists are joined one vehicle at a time,
    filtering each join against the pairwise modules at threshold c2.
    """
    n_vehicles = surrogate.n_vehicles
    incumbent = np.atleast_2d(incumbent)
    incumbent_intervals = np.array([incumbent[0][a:b].sum() for a, b in schedule_bounds])

    all_alloc: list[np.ndarray] = []
    all_intervals: list[np.ndarray] = []
    c1_drawn = c1_kept = pair_drawn = pair_kept = 0
    empty_rounds = 0
    vehicle_empty_rounds = np.zeros(n_vehicles, dtype=int)
    for _ in range(MAX_ROUNDS):
        if sum(len(a) for a in all_alloc) >= n_candidates:
            break
        # a fresh interval allocation per round; every vehicle gets one
        # sampling pass at it so joined candidates share it exactly
        x_f = incumbent_intervals * np.exp(rng.normal(0.0, sigma_pert, size=len(incumbent_intervals)))
        per_vehicle = []
        for i in range(n_vehicles):
            surv, drawn, kept = sample_traj(
                i, x_f, surrogate, thresholds, normalizer, incumbent[i], schedule_bounds,
                rng, n_per_vehicle, n_draw, sigma_pert, filter_level, max_rounds=1,
            )
            c1_drawn += drawn
            c1_kept += kept
            if len(surv) == 0:
                vehicle_empty_rounds[i] += 1
                if vehicle_empty_rounds[i] >= STARVATION_ROUNDS:
                    thresholds.halve_c1(
                        f"vehicle {i} sampler starved after {STARVATION_ROUNDS} rounds; halving c1 to {thresholds.c1 / 2:.4g}"
                    )
                    vehicle_empty_rounds[i] = 0
            else:
                vehicle_empty_rounds[i] = 0
            per_vehicle.append(surv)
        if any(len(s) == 0 for s in per_vehicle):
            empty_rounds += 1
            continue

        current = per_vehicle[0][:, None, :]
        for i in range(1, n_vehicles):
            n_a, n_b = len(current), len(per_vehicle[i])
            if n_a * n_b <= max_join:
                ia, ib = np.divmod(np.arange(n_a * n_b), n_b)
            else:
                flat = rng.permutation(n_a * n_b)[:max_join]
                ia, ib = np.divmod(flat, n_b)
            joined = np.concatenate([current[ia], per_vehicle[i][ib][:, None, :]], axis=1)
            keep = np.ones(len(joined), dtype=bool)
            for j in range(i):
                z = np.concatenate(
                    [joined[:, j, :] / normalizer.base[j], joined[:, i, :] / normalizer.base[i]], axis=1
                )
                _, _, probs = surrogate.predict_level((j, i), z, filter_level)
                pair_drawn += int(keep.sum())
                pair_kept += int((keep & (probs >= thresholds.c2)).sum())
                keep &= probs >= thresholds.c2
            current = joined[keep]
            if len(current) == 0:
                break
        if len(current) == 0:
            empty_rounds += 1
            if n_vehicles > 1 and empty_rounds >= STARVATION_ROUNDS:
                thresholds.halve_c2(
                    f"pair filtering starved after {STARVATION_ROUNDS} rounds; halving c2 to {thresholds.c2 / 2:.4g}"
                )
                empty_rounds = 0
            continue
        empty_rounds = 0
        all_alloc.append(current)
        all_intervals.append(np.tile(x_f, (len(current), 1)))

    if not all_alloc:
        raise RuntimeError("candidate generation produced no candidates")
    allocations = np.concatenate(all_alloc, axis=0)
    intervals = np.concatenate(all_intervals, axis=0)

    cand = CandidateSet(
        allocations=allocations,
        interval_sums=intervals,
        accept_rate_c1=c1_kept / c1_drawn if c1_drawn else float("nan"),
        accept_rate_c2=pair_kept / pair_drawn if pair_drawn else float("nan"),
    )
    for level in levels:
        for i in range(n_vehicles):
            z = allocations[:, i, :] / normalizer.base[i][None, :]
            mu, sigma, _ = surrogate.predict_level(i, z, level)
            cand.vehicle_stats[(level, i)] = (mu, sigma)
        for key in pair_keys(n_vehicles):
            j, i = key
            z = np.concatenate(
                [allocations[:, j, :] / normalizer.base[j], allocations[:, i, :] / normalizer.base[i]], axis=1
            )
            mu, sigma, _ = surrogate.predict_level(key, z, level)
            cand.pair_stats[(level, key)] = (mu, sigma)
    return cand


def alpha_explore(candidates: CandidateSet, surrogate: ModularSurrogate, level: str) -> np.ndarray:
    """Negative summed |mean|/stddev over all modules; max at the boundaries."""
    total = np.zeros(len(candidates))
    for i in range(surrogate.n_vehicles):
        mu, sigma = candidates.vehicle_stats[(level, i)]
        total -= np.abs(mu) / np.maximum(sigma, SIGMA_FLOOR)
    for key in pair_keys(surrogate.n_vehicles):
        mu, sigma = candidates.pair_stats[(level, key)]
        total -= np.abs(mu) / np.maximum(sigma, SIGMA_FLOOR)
    return total


def alpha_exploit(
    candidates: CandidateSet,
    surrogate: ModularSurrogate,
    incumbent: np.ndarray,
    level: str,
    beta: float,
    h_gate: float,
) -> np.ndarray:
    """Makespan improvement times the joint penalized feasibility probability.

    Zero whenever any per-module penalized probability falls below the
    gate h_gate.
    """
    incumbent = np.atleast_2d(incumbent)
    best_makespan = incumbent.sum(axis=1).max()
    improvement = best_makespan - candidates.makespans()
    joint = np.ones(len(candidates))
    gate_ok = np.ones(len(candidates), dtype=bool)
    for i in range(surrogate.n_vehicles):
        p = candidates.penalized_probability(level, i, beta)
        joint *= p
        gate_ok &= p >= h_gate
    for key in pair_keys(surrogate.n_vehicles):
        p = candidates.penalized_probability(level, key, beta)
        joint *= p
        gate_ok &= p >= h_gate
    return np.where(gate_ok, improvement * joint, 0.0)


def select_next(
    candidates: CandidateSet,
    surrogate: ModularSurrogate,
    incumbent: np.ndarray,
    batch: int,
    cost_weights: dict,
    beta: float,
    h_gate: float,
    levels: tuple[str, ...] = (LEVEL_LOW,),
) -> list[tuple[int, str, float]]:
    """Top candidates (index, level, score), cost-weighted and deduplicated.

    Positive acquisition values are divided by the level cost weight,
    negative exploration values multiplied by it, so expensive levels
    rank lower in both regimes. If any exploit value is positive the
    ranking uses only positive exploit entries (the returned batch may
    then be shorter than `batch`); ties break by candidate index.
    """
    exploit = {level: alpha_exploit(candidates, surrogate, incumbent, level, beta, h_gate) for level in levels}
    any_positive = any(np.any(v > 0) for v in exploit.values())

    entries: list[tuple[int, str, float]] = []
    if any_positive:
        for level in levels:
            weighted = exploit[level] / cost_weights[level]
            for idx in np.flatnonzero(exploit[level] > 0):
                entries.append((int(idx), level, float(weighted[idx])))
    else:
        for level in levels:
            raw = alpha_explore(candidates, surrogate, level)
            weighted = np.where(raw >= 0, raw / cost_weights[level], raw * cost_weights[level])
            for idx in range(len(candidates)):
                entries.append((idx, level, float(weighted[idx])))

    level_rank = {level: k for k, level in enumerate(levels)}
    entries.sort(key=lambda e: (-e[2], e[0], level_rank[e[1]]))
    selected: list[tuple[int, str, float]] = []
    seen: set[bytes] = set()
    for idx, level, score in entries:
        digest = candidates.allocations[idx].tobytes()
        if digest in seen:
            continue
        seen.add(digest)
        selected.append((idx, level, score))
        if len(selected) >= batch:
            break
    return selected
