import numpy as np
import pytest

from swarmopt.collision import SampledPath, check_pair, min_separation
from swarmopt.polytraj import PiecewiseTrajectory, min_snap

from .conftest import rng


def constant_path(pos, duration=2.0):
    coeffs = np.zeros((1, 8, 4))
    coeffs[0, 0, :3] = pos
    return PiecewiseTrajectory(coeffs=coeffs, knots=np.array([0.0, duration]))


def linear_path(p0, v, duration):
    coeffs = np.zeros((1, 8, 4))
    coeffs[0, 0, :3] = p0
    coeffs[0, 1, :3] = v
    return PiecewiseTrajectory(coeffs=coeffs, knots=np.array([0.0, duration]))


class TestMinSeparation:
    def test_hovering_vehicles_one_meter_apart(self):
        a = constant_path([0, 0, 1])
        b = constant_path([1, 0, 1])
        d, _ = min_separation(a, b)
        assert d == pytest.approx(1.0, abs=1e-12)

    def test_synchronized_crossing_lines(self):
        # both reach the origin at t = 1
        a = linear_path([-1, 0, 1], [1, 0, 0], 2.0)
        b = linear_path([0, -1, 1], [0, 1, 0], 2.0)
        d, t = min_separation(a, b)
        assert d == pytest.approx(0.0, abs=1e-9)
        assert t == pytest.approx(1.0, abs=0.005)

    def test_fine_grid_oracle_agreement(self, toy2_env):
        trajs = []
        for i in range(2):
            sched = toy2_env.formation
            wps = [(sched.segment_ends[0], sched.waypoints[i, 0])]
            trajs.append(
                min_snap(np.array([1.5, 1.5, 1.5]), toy2_env.corridors[i], toy2_env.starts[i], toy2_env.ends[i], wps)
            )
        d_coarse, _ = min_separation(trajs[0], trajs[1], dt=0.005)
        d_fine, _ = min_separation(trajs[0], trajs[1], dt=0.0005)
        assert abs(d_coarse - d_fine) < 1e-3

    def test_hold_at_goal_after_early_finish(self):
        short = linear_path([0, 0, 1], [1, 0, 0], 1.0)  # stops at (1,0,1)
        long = constant_path([3, 0, 1], duration=4.0)
        d, t = min_separation(short, long)
        assert d == pytest.approx(2.0, abs=1e-9)
        assert t >= 1.0

    def test_grid_refinement_monotone(self):
        g = rng(5)
        for _ in range(5):
            a = linear_path(g.normal(size=3), g.normal(size=3), 2.0)
            b = linear_path(g.normal(size=3), g.normal(size=3), 2.0)
            d1, _ = min_separation(a, b, dt=0.01)
            d2, _ = min_separation(a, b, dt=0.005)
            assert d2 <= d1 + 1e-9

    def test_translation_invariance(self):
        g = rng(6)
        a = linear_path([0, 0, 1], [0.5, 0.2, 0], 2.0)
        b = linear_path([1, 1, 1], [-0.3, 0.1, 0], 2.0)
        d0, _ = min_separation(a, b)
        shift = g.normal(size=3)
        d1, _ = min_separation(a.translated(shift), b.translated(shift))
        assert abs(d0 - d1) < 1e-12


class TestCheckPair:
    def test_barely_clear(self):
        a = constant_path([0, 0, 1])
        b = constant_path([0.41, 0, 1])
        assert check_pair(a, b, 0.40) is True

    def test_barely_violating(self):
        a = constant_path([0, 0, 1])
        b = constant_path([0.39, 0, 1])
        assert check_pair(a, b, 0.40) is False

    def test_symmetry(self):
        a = linear_path([0, 0, 1], [0.5, 0, 0], 2.0)
        b = linear_path([1, 0.3, 1], [-0.5, 0, 0], 2.0)
        assert check_pair(a, b, 0.4) == check_pair(b, a, 0.4)

    def test_batch_labels_match_recomputation(self):
        g = rng(9)
        paths = [linear_path(g.uniform(-2, 2, 3), g.uniform(-1, 1, 3), 2.0) for _ in range(20)]
        pairs = [(i, j) for i in range(10) for j in range(10, 20)]
        labels = [check_pair(paths[i], paths[j], 0.6) for i, j in pairs]
        for (i, j), label in zip(pairs, labels):
            d, _ = min_separation(paths[i], paths[j])
            assert label == (d >= 0.6)


class TestSampledPath:
    def test_interpolation_and_hold(self):
        times = np.array([0.0, 1.0, 2.0])
        positions = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0]], dtype=float)
        path = SampledPath(times=times, positions=positions)
        assert np.allclose(path.eval_held(np.array([0.5]))[0], [0.5, 0, 0])
        assert np.allclose(path.eval_held(np.array([10.0]))[0], [1, 1, 0])

    def test_min_separation_on_sampled_paths(self):
        t = np.linspace(0, 2, 201)
        a = SampledPath(times=t, positions=np.stack([t, np.zeros_like(t), np.ones_like(t)], axis=1))
        b = SampledPath(times=t, positions=np.stack([2 - t, np.zeros_like(t), np.ones_like(t)], axis=1))
        d, t_star = min_separation(a, b)
        assert d == pytest.approx(0.0, abs=1e-9)
        assert t_star == pytest.approx(1.0, abs=0.005)
