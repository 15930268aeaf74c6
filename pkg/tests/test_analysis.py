"""Imitation weights, action distances, coefficient maps and run comparisons."""

from __future__ import annotations

import math

import numpy as np
import pytest

from famo2o.analysis import (
    TrajectoryDiagnostics,
    action_distance,
    beta_statistics,
    bin_by_return,
    diff_vs_baseline,
    guided_fraction_map,
    guided_vs_unguided,
    imitation_weight,
    imitation_weights,
    maze_action_vector,
    maze_beta_map,
    pearson,
    per_trajectory,
    write_rows_csv,
)
from famo2o.datastore import Transition
from famo2o.envs import MazeSpec, collect_maze_dataset, shortest_path_action, bfs_distances


class TestImitationWeight:
    def test_zero_advantage(self):
        assert imitation_weight(3.7, 1.25, 1.25) == (1.0, False)

    def test_zero_beta(self):
        assert imitation_weight(0.0, 4.0, -2.0)[0] == 1.0

    def test_substitution(self):
        np.testing.assert_allclose(imitation_weight(2.0, 1.5, 1.0)[0], 2.718281828, rtol=1e-9)

    def test_overflow_sentinel(self):
        w, flagged = imitation_weight(5.0, 200.0, 0.0)
        assert flagged and w == math.inf

    def test_vectorised_uncapped(self):
        w = imitation_weights(np.array([1.0, 1.0]), np.array([30.0, 1000.0]), np.zeros(2))
        np.testing.assert_allclose(w[0], math.exp(30.0))
        assert w[1] == math.inf

    def test_monotone_in_advantage(self):
        adv = np.linspace(-3, 3, 50)
        assert np.all(np.diff(imitation_weights(np.full(50, 1.5), adv, np.zeros(50))) > 0)
        np.testing.assert_array_equal(imitation_weights(np.zeros(50), adv, np.zeros(50)), 1.0)


def _ct(a, s=(0.0, 0.0), ep=0, t=0):
    return Transition(s, a, 0.0, s, False, ep, t)


class TestActionDistance:
    def test_matching_mode(self):
        traj = [_ct((0.1, -0.1)), _ct((0.1, -0.1), t=1)]
        assert action_distance(lambda s: np.array([0.1, -0.1]), traj) == 0.0

    def test_one_dimensional(self):
        traj = [_ct((0.0,), s=(0.0,)), _ct((1.0,), s=(0.0,), t=1)]
        assert action_distance(lambda s: np.array([0.5]), traj) == 0.25

    def test_empty(self):
        with pytest.raises(ValueError):
            action_distance(lambda s: 0, [])

    def test_maze_displacements(self):
        # up vs down is two cells apart, up vs right is sqrt(2)
        traj = [Transition((1, 1), 1, -1.0, (2, 1), False, 0, 0), Transition((1, 1), 3, -1.0, (1, 2), False, 0, 1)]
        assert action_distance(lambda s: 0, traj) == (4.0 + 2.0) / 2
        np.testing.assert_array_equal(maze_action_vector(3), [0.0, 1.0])

    def test_random_gaussian_recomputation(self):
        spec = MazeSpec()
        dist = bfs_distances(spec)
        data, _ = collect_maze_dataset(spec, 3, np.random.default_rng(0), mode="guided")
        rng = np.random.default_rng(1)
        modes = {}

        def mode_fn(s):
            # a fixed random "policy mode" per cell
            if s not in modes:
                modes[s] = int(rng.integers(0, 4))
            return modes[s]

        got = action_distance(mode_fn, data)
        moves = {0: (-1, 0), 1: (1, 0), 2: (0, -1), 3: (0, 1)}
        expected = sum((moves[modes[t.s]][0] - moves[t.a][0]) ** 2 + (moves[modes[t.s]][1] - moves[t.a][1]) ** 2
                       for t in data) / len(data)
        assert abs(got - expected) < 1e-9
        assert all(t.a == shortest_path_action(spec, t.s, dist) for t in data if t.guided and t.s in dist)

    def test_reordering_invariant(self):
        data, _ = collect_maze_dataset(MazeSpec(), 4, np.random.default_rng(2))
        fn = lambda s: (s[0] + s[1]) % 4  # noqa: E731
        a = action_distance(fn, data)
        b = action_distance(fn, list(reversed(data)))
        assert abs(a - b) < 1e-12 and a >= 0


class TestBetaStatistics:
    def test_constant(self):
        assert beta_statistics({"x": np.full(10, 2.5)})["x"].std == 0.0

    def test_population_std(self):
        s = beta_statistics({"x": [1.0, 3.0]})["x"]
        assert (s.mean, s.std, s.count) == (2.0, 1.0, 2)

    def test_empty_label(self):
        assert beta_statistics({"x": []})["x"].count == 0

    def test_uniform_moments(self):
        draws = np.random.default_rng(0).uniform(1.0, 5.0, 20_000)
        s = beta_statistics({"offline": draws})["offline"]
        sigma = 4.0 / math.sqrt(12.0)
        assert abs(s.mean - 3.0) < 3 * sigma / math.sqrt(draws.size)


class TestMazeMaps:
    def test_constant_balance_uniform_grid(self):
        spec = MazeSpec()
        dist = bfs_distances(spec)
        bm = maze_beta_map(lambda c: (shortest_path_action(spec, c, dist), 2.0), spec)
        visited = bm[~np.isnan(bm)]
        np.testing.assert_array_equal(visited, 2.0)
        assert np.isnan(bm[spec.goal])

    def test_straight_line_rollout(self):
        spec = MazeSpec()
        # from (0, 0) always move down: (0,0) -> ... -> (5,0), then stuck against the edge until the limit
        bm = maze_beta_map(lambda c: (1, float(c[0])), spec, starts=[(0, 0)])
        visited = set(zip(*np.nonzero(~np.isnan(bm))))
        assert visited == {(r, 0) for r in range(6)}
        np.testing.assert_array_equal(bm[:, 0], np.arange(6.0))

    def test_guided_split(self):
        bm = np.array([[1.0, 2.0], [3.0, np.nan]])
        gf = np.array([[1.0, 0.0], [0.6, 1.0]])
        assert guided_vs_unguided(bm, gf) == (2.0, 2.0)
        assert guided_vs_unguided(bm, gf, threshold=0.8) == (1.0, 2.5)

    def test_guided_fraction(self):
        spec = MazeSpec()
        data = [Transition((0, 0), 1, -1.0, (1, 0), False, 0, 0, True),
                Transition((0, 0), 3, -1.0, (0, 1), False, 1, 0, False)]
        gf = guided_fraction_map(data, spec)
        assert gf[0, 0] == 0.5 and np.isnan(gf[1, 1])


class TestDiff:
    def _rows(self, offset=0.0):
        return [TrajectoryDiagnostics(e, float(e), 1.0 + e + offset, 0.5 * e) for e in range(6)]

    def test_identical_runs(self):
        rows = diff_vs_baseline(self._rows(), self._rows())
        assert all(r.delta_weight == 0.0 and r.delta_distance == 0.0 for r in rows)

    def test_shifted_weights(self):
        rows = diff_vs_baseline(self._rows(1.0), self._rows())
        assert all(r.delta_weight == 1.0 for r in rows)

    def test_binning(self):
        rows = diff_vs_baseline(self._rows(1.0), self._rows())
        bins = bin_by_return(rows, n_bins=3)
        assert sum(b["n"] for b in bins) == 6
        assert all(b["mean_delta_weight"] == 1.0 for b in bins)

    def test_per_trajectory_rows(self):
        data, _ = collect_maze_dataset(MazeSpec(), 5, np.random.default_rng(3))
        rows = per_trajectory(data, lambda trs: np.ones(len(trs)), lambda s: 0, discrete=True)
        assert sorted(r.episode for r in rows) == list(range(5))
        assert all(r.mean_imitation_weight == 1.0 and math.isfinite(r.mean_action_distance) for r in rows)

    def test_pearson(self):
        np.testing.assert_allclose(pearson([1, 2, 3], [2, 4, 6.5]), np.corrcoef([1, 2, 3], [2, 4, 6.5])[0, 1])
        assert math.isnan(pearson([1, 1], [2, 3]))

    def test_csv(self, tmp_path):
        path = tmp_path / "x.csv"
        write_rows_csv(path, [{"a": 1, "b": 0.5}])
        assert path.read_text() == "a,b\n1,0.5\n"
