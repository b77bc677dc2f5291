import numpy as np
import pytest
from scipy.special import ndtri

from swarmopt.acquisition import (
    CandidateSet,
    RejectionThresholds,
    alpha_explore,
    alpha_exploit,
    build_candidates,
    sample_traj,
    select_next,
)
from swarmopt.surrogate import LEVEL_HIGH, LEVEL_LOW, Dataset, GpcModule, ModularSurrogate, Normalizer

from .conftest import rng

TINY = 1e-9


def make_candidates(n, n_vehicles=2, m=2, makespans=None, seed=0):
    g = rng(seed)
    alloc = g.uniform(0.5, 2.0, size=(n, n_vehicles, m))
    if makespans is not None:
        for k, ms in enumerate(makespans):
            alloc[k] *= ms / alloc[k].sum(axis=1).max()
    intervals = alloc[:, 0, :].copy()
    return CandidateSet(allocations=alloc, interval_sums=intervals)


def set_stats(cand, surrogate, level, mu_by_key, sigma=TINY):
    n = len(cand)
    for i in range(surrogate.n_vehicles):
        mu = np.full(n, mu_by_key.get(i, 40.0))
        cand.vehicle_stats[(level, i)] = (mu, np.full(n, sigma))
    for key in [(a, b) for a in range(surrogate.n_vehicles) for b in range(a + 1, surrogate.n_vehicles)]:
        mu = np.full(n, mu_by_key.get(key, 40.0))
        cand.pair_stats[(level, key)] = (mu, np.full(n, sigma))


class TestSampleTraj:
    def _setup(self, n_vehicles=1, m=2):
        surrogate = ModularSurrogate(n_vehicles=n_vehicles, n_segments=m)
        normalizer = Normalizer(np.ones((n_vehicles, m)))
        incumbent = np.ones(m)
        bounds = [(0, m)]
        return surrogate, normalizer, incumbent, bounds

    def test_uninformative_module_accepts_everything(self):
        surrogate, normalizer, incumbent, bounds = self._setup()
        thresholds = RejectionThresholds(c1=0.4)
        surv, drawn, kept = sample_traj(
            0, np.array([2.0]), surrogate, thresholds, normalizer, incumbent, bounds,
            rng(0), n_target=64, n_draw=64, sigma_pert=0.15,
        )
        assert len(surv) == 64
        assert kept == drawn  # prior probability 0.5 >= 0.4 everywhere

    def test_starvation_guard_halves_c1(self):
        surrogate, normalizer, incumbent, bounds = self._setup()
        thresholds = RejectionThresholds(c1=0.999)
        surv, _, _ = sample_traj(
            0, np.array([2.0]), surrogate, thresholds, normalizer, incumbent, bounds,
            rng(0), n_target=8, n_draw=16, sigma_pert=0.15,
        )
        assert thresholds.c1 < 0.999
        assert any("starved" in w for w in thresholds.warnings)
        assert len(surv) == 8  # halving eventually lets 0.5-probability samples through

    def test_interval_sums_match_exactly(self):
        surrogate = ModularSurrogate(n_vehicles=1, n_segments=4)
        normalizer = Normalizer(np.full((1, 4), 1.5))
        incumbent = np.full(4, 1.5)
        bounds = [(0, 2), (2, 4)]
        x_f = np.array([2.5, 3.5])
        thresholds = RejectionThresholds(c1=0.4)
        surv, _, _ = sample_traj(
            0, x_f, surrogate, thresholds, normalizer, incumbent, bounds,
            rng(3), n_target=128, n_draw=128, sigma_pert=0.2,
        )
        sums = np.stack([surv[:, 0:2].sum(axis=1), surv[:, 2:4].sum(axis=1)], axis=1)
        assert np.abs(sums - x_f[None, :]).max() < 1e-9

    def test_positive_durations(self):
        surrogate, normalizer, incumbent, bounds = self._setup(m=3)
        thresholds = RejectionThresholds(c1=0.4)
        surv, _, _ = sample_traj(
            0, np.array([3.0]), surrogate, thresholds, normalizer, np.ones(3), [(0, 3)],
            rng(4), n_target=64, n_draw=64, sigma_pert=0.3,
        )
        assert np.all(surv > 0)


class TestBuildCandidates:
    def test_single_vehicle_reaches_target(self):
        surrogate = ModularSurrogate(n_vehicles=1, n_segments=2)
        normalizer = Normalizer(np.ones((1, 2)))
        thresholds = RejectionThresholds(c1=0.4)
        cand = build_candidates(
            [(0, 2)], surrogate, thresholds, normalizer, np.ones((1, 2)), rng(0),
            n_draw=64, n_per_vehicle=32, n_candidates=128,
        )
        assert len(cand) >= 128
        assert not np.isnan(cand.accept_rate_c1)

    def test_pair_rejection_starves_c2(self):
        surrogate = ModularSurrogate(n_vehicles=2, n_segments=2)
        # train the pair module to reject everything near the incumbent
        g = rng(5)
        Z = np.concatenate([g.uniform(0.5, 1.5, size=(40, 4))])
        y = np.zeros(40, dtype=int)
        y[:2] = 1  # two distant positives keep the fit two-class
        Z[:2] += 10.0
        surrogate.modules[(LEVEL_LOW, (0, 1))] = GpcModule.fit(Z, y, optimize_hyperparams=False, theta=np.array([np.log(4.0)] + [np.log(1.0)] * 4))
        normalizer = Normalizer(np.ones((2, 2)))
        thresholds = RejectionThresholds(c1=0.4, c2=0.9)
        c2_before = thresholds.c2
        cand = build_candidates(
            [(0, 2)], surrogate, thresholds, normalizer, np.ones((2, 2)), rng(0),
            n_draw=32, n_per_vehicle=16, n_candidates=64, max_join=64,
        )
        assert thresholds.c2 < c2_before
        assert any("halving c2" in w for w in thresholds.warnings)
        assert len(cand) > 0

    def test_cached_stats_match_recomputation(self):
        surrogate = ModularSurrogate(n_vehicles=2, n_segments=2)
        normalizer = Normalizer(np.full((2, 2), 1.2))
        thresholds = RejectionThresholds(c1=0.4)
        cand = build_candidates(
            [(0, 2)], surrogate, thresholds, normalizer, np.full((2, 2), 1.2), rng(1),
            n_draw=32, n_per_vehicle=16, n_candidates=32, max_join=128,
        )
        for i in range(2):
            z = cand.allocations[:, i, :] / normalizer.base[i]
            mu, sigma, _ = surrogate.predict_level(i, z, LEVEL_LOW)
            mu_c, sigma_c = cand.vehicle_stats[(LEVEL_LOW, i)]
            assert np.allclose(mu, mu_c) and np.allclose(sigma, sigma_c)
        z = np.concatenate(
            [cand.allocations[:, 0, :] / normalizer.base[0], cand.allocations[:, 1, :] / normalizer.base[1]], axis=1
        )
        mu, sigma, _ = surrogate.predict_level((0, 1), z, LEVEL_LOW)
        mu_c, sigma_c = cand.pair_stats[(LEVEL_LOW, (0, 1))]
        assert np.allclose(mu, mu_c) and np.allclose(sigma, sigma_c)

    def test_synchronization_exact_across_vehicles(self):
        surrogate = ModularSurrogate(n_vehicles=3, n_segments=3)
        normalizer = Normalizer(np.ones((3, 3)))
        thresholds = RejectionThresholds(c1=0.4)
        bounds = [(0, 2), (2, 3)]
        cand = build_candidates(
            bounds, surrogate, thresholds, normalizer, np.ones((3, 3)), rng(2),
            n_draw=32, n_per_vehicle=8, n_candidates=64, max_join=256,
        )
        for a, b in bounds:
            sums = cand.allocations[:, :, a:b].sum(axis=2)
            assert np.abs(sums - sums[:, :1]).max() < 1e-9

    def test_deterministic_under_fixed_seed(self):
        surrogate = ModularSurrogate(n_vehicles=2, n_segments=2)
        normalizer = Normalizer(np.ones((2, 2)))
        out = []
        for _ in range(2):
            thresholds = RejectionThresholds(c1=0.4)
            cand = build_candidates(
                [(0, 2)], surrogate, thresholds, normalizer, np.ones((2, 2)), rng(9),
                n_draw=32, n_per_vehicle=16, n_candidates=64, max_join=128,
            )
            out.append(cand.allocations)
        assert np.array_equal(out[0], out[1])


class TestAlphaExplore:
    def _surrogate(self):
        return ModularSurrogate(n_vehicles=2, n_segments=2)

    def test_zero_means_give_global_max(self):
        surrogate = self._surrogate()
        cand = make_candidates(4)
        set_stats(cand, surrogate, LEVEL_LOW, {0: 0.0, 1: 0.0, (0, 1): 0.0}, sigma=1.0)
        vals = alpha_explore(cand, surrogate, LEVEL_LOW)
        assert np.allclose(vals, 0.0)

    def test_doubling_one_mean_strictly_decreases(self):
        surrogate = self._surrogate()
        cand = make_candidates(2)
        for key in [0, 1, (0, 1)]:
            base = {0: 0.5, 1: 0.5, (0, 1): 0.5}
            set_stats(cand, surrogate, LEVEL_LOW, base, sigma=1.0)
            v0 = alpha_explore(cand, surrogate, LEVEL_LOW)[0]
            base[key] = 1.0
            set_stats(cand, surrogate, LEVEL_LOW, base, sigma=1.0)
            v1 = alpha_explore(cand, surrogate, LEVEL_LOW)[0]
            assert v1 < v0

    def test_argmax_near_decision_boundary(self):
        # 1-vehicle, 1-segment surrogate with boundary at x = 1
        surrogate = ModularSurrogate(n_vehicles=1, n_segments=1)
        g = rng(13)
        X = np.sort(g.uniform(0.5, 1.5, size=30))[:, None]
        y = (X[:, 0] > 1.0).astype(int)
        surrogate.modules[(LEVEL_LOW, 0)] = GpcModule.fit(X, y)
        grid = np.linspace(0.6, 1.4, 81)
        alloc = grid[:, None, None]
        cand = CandidateSet(allocations=alloc, interval_sums=grid[:, None])
        mu, sigma, prob = surrogate.predict_level(0, grid[:, None], LEVEL_LOW)
        cand.vehicle_stats[(LEVEL_LOW, 0)] = (mu, sigma)
        vals = alpha_explore(cand, surrogate, LEVEL_LOW)
        argmax_x = grid[int(np.argmax(vals))]
        boundary_x = grid[int(np.argmin(np.abs(prob - 0.5)))]
        assert abs(argmax_x - boundary_x) <= (grid[1] - grid[0]) + 1e-12


class TestAlphaExploit:
    def _surrogate(self):
        return ModularSurrogate(n_vehicles=2, n_segments=2)

    def test_incumbent_itself_scores_zero(self):
        surrogate = self._surrogate()
        incumbent = np.ones((2, 2))
        cand = CandidateSet(allocations=incumbent[None], interval_sums=np.ones((1, 2)))
        set_stats(cand, surrogate, LEVEL_LOW, {})
        vals = alpha_exploit(cand, surrogate, incumbent, LEVEL_LOW, beta=3.0, h_gate=0.001)
        assert vals[0] == pytest.approx(0.0, abs=1e-12)

    def test_unit_improvement_with_unit_probabilities(self):
        surrogate = self._surrogate()
        incumbent = np.ones((2, 2)) * 1.5  # makespan 3.0
        cand = make_candidates(1, makespans=[2.0])
        set_stats(cand, surrogate, LEVEL_LOW, {})  # mu=40, sigma tiny: penalized prob = 1
        vals = alpha_exploit(cand, surrogate, incumbent, LEVEL_LOW, beta=3.0, h_gate=0.001)
        assert vals[0] == pytest.approx(1.0, rel=1e-9)

    def test_single_gated_factor_zeroes_value(self):
        surrogate = self._surrogate()
        incumbent = np.ones((2, 2)) * 2.0
        cand = make_candidates(1, makespans=[1.0])
        h = 0.001
        mu_gated = ndtri(h / 2)  # penalized prob ~ h/2 < h at tiny sigma
        set_stats(cand, surrogate, LEVEL_LOW, {1: mu_gated})
        vals = alpha_exploit(cand, surrogate, incumbent, LEVEL_LOW, beta=3.0, h_gate=h)
        assert vals[0] == 0.0


class TestSelectNext:
    def _surrogate(self):
        return ModularSurrogate(n_vehicles=2, n_segments=2)

    def test_all_exploit_zero_falls_back_to_explore_ranking(self):
        surrogate = self._surrogate()
        incumbent = np.ones((2, 2)) * 0.1  # every candidate is slower: EI < 0
        cand = make_candidates(6)
        mus = np.linspace(0.2, 1.2, 6)
        set_stats(cand, surrogate, LEVEL_LOW, {})
        cand.vehicle_stats[(LEVEL_LOW, 0)] = (mus, np.ones(6))
        cand.vehicle_stats[(LEVEL_LOW, 1)] = (np.zeros(6), np.ones(6))
        cand.pair_stats[(LEVEL_LOW, (0, 1))] = (np.zeros(6), np.ones(6))
        explore = alpha_explore(cand, surrogate, LEVEL_LOW)
        order = np.argsort(-explore)
        picked = select_next(cand, surrogate, incumbent, 3, {LEVEL_LOW: 1.0}, 3.0, 0.001)
        assert [idx for idx, _, _ in picked] == list(order[:3])

    def test_duplicate_candidate_selected_once(self):
        surrogate = self._surrogate()
        incumbent = np.ones((2, 2)) * 2.0
        alloc = np.ones((2, 2, 2))  # identical rows
        cand = CandidateSet(allocations=alloc, interval_sums=np.ones((2, 2)))
        set_stats(cand, surrogate, LEVEL_LOW, {})
        picked = select_next(cand, surrogate, incumbent, 2, {LEVEL_LOW: 1.0}, 3.0, 0.001)
        assert len(picked) == 1

    def test_equal_raw_alpha_prefers_cheap_level(self):
        surrogate = ModularSurrogate(n_vehicles=2, n_segments=2, levels=(LEVEL_LOW, LEVEL_HIGH))
        incumbent = np.ones((2, 2)) * 2.0
        cand = make_candidates(1, makespans=[3.0])
        set_stats(cand, surrogate, LEVEL_LOW, {})
        set_stats(cand, surrogate, LEVEL_HIGH, {})
        picked = select_next(
            cand, surrogate, incumbent, 1, {LEVEL_LOW: 1.0, LEVEL_HIGH: 10.0}, 3.0, 0.001,
            levels=(LEVEL_LOW, LEVEL_HIGH),
        )
        assert picked[0][1] == LEVEL_LOW

    def test_gate_soundness_randomized(self):
        surrogate = self._surrogate()
        g = rng(17)
        h = 0.001
        violations = 0
        for trial in range(200):
            n = 16
            cand = make_candidates(n, seed=trial)
            for key in [0, 1, (0, 1)]:
                mu = g.normal(0.0, 2.0, size=n)
                sigma = g.uniform(0.05, 2.0, size=n)
                if isinstance(key, tuple):
                    cand.pair_stats[(LEVEL_LOW, key)] = (mu, sigma)
                else:
                    cand.vehicle_stats[(LEVEL_LOW, key)] = (mu, sigma)
            incumbent = np.ones((2, 2)) * g.uniform(0.5, 3.0)
            exploit = alpha_exploit(cand, surrogate, incumbent, LEVEL_LOW, 3.0, h)
            if not np.any(exploit > 0):
                continue
            picked = select_next(cand, surrogate, incumbent, 4, {LEVEL_LOW: 1.0}, 3.0, h)
            for idx, level, _ in picked:
                for key in [0, 1, (0, 1)]:
                    p = cand.penalized_probability(level, key, 3.0)[idx]
                    if p < h:
                        violations += 1
        assert violations == 0


class TestThresholds:
    def test_adapt_moves_exactly_one_percent(self):
        t = RejectionThresholds(c1=0.5, c2=0.5, target_acceptance=0.25, step=0.01)
        t.adapt(rate_c1=0.1, rate_c2=0.9)  # c1 loosens, c2 tightens
        assert t.c1 == pytest.approx(0.5 * 0.99, abs=1e-12)
        assert t.c2 == pytest.approx(0.5 * 1.01, abs=1e-12)

    def test_adapt_no_change_at_target(self):
        t = RejectionThresholds(c1=0.5, c2=0.5, target_acceptance=0.25)
        t.adapt(rate_c1=0.25, rate_c2=0.25)
        assert t.c1 == 0.5 and t.c2 == 0.5

    def test_clipping(self):
        t = RejectionThresholds(c1=0.999, c2=1e-4)
        t.adapt(rate_c1=0.9, rate_c2=0.1)
        assert t.c1 <= 0.999
        assert t.c2 >= 1e-4
