import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mapfgnn.errors import InfeasibleCase, OutOfBounds
from mapfgnn.gridworld import (
    ACTION_OFFSETS,
    DensitySpec,
    GridMap,
    build_gso,
    build_local_observation,
    generate_case,
    generate_map,
    step_positions,
    team_observations,
)


def empty_map(w, h):
    return GridMap(w, h, frozenset())


class TestGenerateMap:
    def test_obstacle_count_20x20_density_010(self):
        m = generate_map(20, 20, 0.10, seed=7)
        assert len(m.obstacles) == 40

    def test_zero_density_gives_empty_map(self):
        m = generate_map(5, 5, 0.0, seed=1)
        assert m.obstacles == frozenset()
        assert len(m.free_cells()) == 25

    def test_deterministic_given_seed(self):
        a = generate_map(12, 9, 0.25, seed=42)
        b = generate_map(12, 9, 0.25, seed=42)
        assert a.obstacles == b.obstacles

    def test_different_seeds_differ(self):
        a = generate_map(20, 20, 0.10, seed=1)
        b = generate_map(20, 20, 0.10, seed=2)
        assert a.obstacles != b.obstacles

    def test_obstacles_inside_bounds(self):
        m = generate_map(7, 13, 0.3, seed=3)
        assert all(m.in_bounds(c) for c in m.obstacles)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            generate_map(1, 5, 0.1, seed=0)
        with pytest.raises(ValueError):
            generate_map(5, 5, 1.0, seed=0)


class TestGenerateCase:
    def test_pigeonhole_full_occupancy(self):
        m = empty_map(2, 2)
        case = generate_case(m, 4, seed=0)
        assert set(case.starts) == set(m.free_cells())
        assert set(case.goals) == set(m.free_cells())
        assert all(s != g for s, g in zip(case.starts, case.goals))

    def test_capacity_overflow_raises(self):
        m = empty_map(2, 2)
        with pytest.raises(InfeasibleCase):
            generate_case(m, 5, seed=0)

    def test_isolated_cell_never_paired_across_the_wall(self):
        # (0,0) is walled off from the rest of the 3x3 map
        m = GridMap(3, 3, frozenset({(1, 0), (0, 1), (1, 1)}))
        for seed in range(30):
            case = generate_case(m, 2, seed=seed)
            for s, g in zip(case.starts, case.goals):
                assert ((s == (0, 0)) == (g == (0, 0)))

    def test_validity_invariants(self):
        m = generate_map(10, 10, 0.2, seed=5)
        case = generate_case(m, 6, seed=9)
        assert len(set(case.starts)) == 6
        assert len(set(case.goals)) == 6
        assert all(m.is_free(c) for c in case.starts + case.goals)
        assert all(s != g for s, g in zip(case.starts, case.goals))

    def test_deterministic_given_seed(self):
        m = generate_map(10, 10, 0.1, seed=0)
        a = generate_case(m, 4, seed=11)
        b = generate_case(m, 4, seed=11)
        assert a == b


class TestLocalObservation:
    def test_goal_in_view_relative_placement(self):
        m = empty_map(20, 20)
        obs = build_local_observation(m, [(5, 5)], [(6, 5)], 0, fov_radius=4)
        goal_chan = obs.channels[1]
        assert goal_chan[4, 5] == 1.0
        assert goal_chan.sum() == 1.0
        assert obs.channels[2][4, 4] == 1.0

    def test_goal_out_of_view_clamped_componentwise(self):
        m = empty_map(60, 60)
        obs = build_local_observation(m, [(5, 5)], [(5, 50)], 0, fov_radius=4)
        goal_chan = obs.channels[1]
        # straight down, clamped to relative (0, +4)
        assert goal_chan[8, 4] == 1.0
        assert goal_chan.sum() == 1.0

    def test_interior_no_obstacles_channel_zero(self):
        m = empty_map(20, 20)
        obs = build_local_observation(m, [(10, 10)], [(11, 10)], 0, fov_radius=4)
        assert not obs.channels[0].any()

    def test_border_padding_marked_as_obstacle(self):
        m = empty_map(20, 20)
        obs = build_local_observation(m, [(0, 0)], [(1, 1)], 0, fov_radius=4)
        # everything left of / above the map reads as an obstacle
        assert obs.channels[0][:, :4].all()
        assert obs.channels[0][:4, :].all()
        assert not obs.channels[0][4:, 4:].any()

    def test_real_obstacle_appears(self):
        m = GridMap(9, 9, frozenset({(5, 4)}))
        obs = build_local_observation(m, [(4, 4)], [(0, 0)], 0, fov_radius=4)
        assert obs.channels[0][4, 5] == 1.0

    def test_other_robots_inside_fov_only(self):
        m = empty_map(30, 30)
        positions = [(10, 10), (12, 10), (10, 20)]
        goals = [(0, 0)] * 3
        obs = build_local_observation(m, positions, goals, 0, fov_radius=4)
        self_chan = obs.channels[2]
        assert self_chan[4, 4] == 1.0
        assert self_chan[4, 6] == 1.0
        assert self_chan.sum() == 2.0

    def test_window_shape(self):
        m = empty_map(20, 20)
        obs = build_local_observation(m, [(5, 5)], [(6, 5)], 0, fov_radius=4)
        assert obs.channels.shape == (3, 9, 9)
        assert obs.window == 9

    @given(
        x=st.integers(0, 19),
        y=st.integers(0, 19),
        gx=st.integers(0, 19),
        gy=st.integers(0, 19),
    )
    @settings(max_examples=60, deadline=None)
    def test_goal_channel_always_single_one(self, x, y, gx, gy):
        m = empty_map(20, 20)
        obs = build_local_observation(m, [(x, y)], [(gx, gy)], 0, fov_radius=4)
        assert obs.channels[1].sum() == 1.0
        assert obs.channels[2][4, 4] == 1.0

    def test_team_observations_stack(self):
        m = empty_map(10, 10)
        stacked = team_observations(m, [(1, 1), (8, 8)], [(2, 2), (7, 7)])
        assert stacked.shape == (2, 3, 9, 9)
        single = build_local_observation(m, [(1, 1), (8, 8)], [(2, 2), (7, 7)], 1)
        assert np.array_equal(stacked[1], single.channels)


class TestGso:
    def test_two_robots_in_range(self):
        gso = build_gso([(0, 0), (3, 0)], comm_radius=5.0)
        assert np.array_equal(gso.matrix, [[0.0, 1.0], [1.0, 0.0]])

    def test_single_robot(self):
        gso = build_gso([(4, 4)], comm_radius=5.0)
        assert np.array_equal(gso.matrix, [[0.0]])

    def test_two_robots_out_of_range(self):
        gso = build_gso([(0, 0), (6, 0)], comm_radius=5.0)
        assert not gso.matrix.any()

    def test_boundary_distance_counts(self):
        gso = build_gso([(0, 0), (3, 4)], comm_radius=5.0)
        assert gso.matrix[0, 1] == 1.0

    def test_spectral_radius_bounded(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            pts = [tuple(p) for p in rng.integers(0, 12, size=(8, 2))]
            gso = build_gso(pts, comm_radius=5.0)
            eigs = np.abs(np.linalg.eigvals(gso.matrix))
            assert eigs.max() <= 1.0 + 1e-9

    @given(
        dx=st.integers(-50, 50),
        dy=st.integers(-50, 50),
        n=st.integers(2, 6),
        seed=st.integers(0, 1000),
    )
    @settings(max_examples=40, deadline=None)
    def test_translation_invariance(self, dx, dy, n, seed):
        rng = np.random.default_rng(seed)
        pts = [tuple(int(v) for v in p) for p in rng.integers(0, 15, size=(n, 2))]
        moved = [(x + dx, y + dy) for x, y in pts]
        a = build_gso(pts).matrix
        b = build_gso(moved).matrix
        assert np.allclose(a, b)

    @given(n=st.integers(2, 6), seed=st.integers(0, 1000))
    @settings(max_examples=40, deadline=None)
    def test_permutation_consistency(self, n, seed):
        rng = np.random.default_rng(seed)
        pts = [tuple(int(v) for v in p) for p in rng.integers(0, 12, size=(n, 2))]
        perm = rng.permutation(n)
        base = build_gso(pts).matrix
        permuted = build_gso([pts[i] for i in perm]).matrix
        assert np.allclose(permuted, base[np.ix_(perm, perm)])

    def test_symmetry_and_zero_diagonal(self):
        rng = np.random.default_rng(3)
        pts = [tuple(int(v) for v in p) for p in rng.integers(0, 10, size=(7, 2))]
        mat = build_gso(pts).matrix
        assert np.allclose(mat, mat.T)
        assert np.all(np.diag(mat) == 0.0)


class TestStepPositions:
    def test_idle_stays(self):
        m = empty_map(5, 5)
        assert step_positions(m, [(1, 1)], [0]) == [(1, 1)]

    def test_right_moves_positive_x(self):
        m = empty_map(5, 5)
        assert step_positions(m, [(1, 1)], [4]) == [(2, 1)]

    def test_up_moves_negative_y(self):
        m = empty_map(5, 5)
        assert step_positions(m, [(1, 1)], [1]) == [(1, 0)]

    def test_off_map_raises(self):
        m = empty_map(5, 5)
        with pytest.raises(OutOfBounds):
            step_positions(m, [(0, 0)], [2])

    def test_action_offsets_convention(self):
        assert ACTION_OFFSETS == ((0, 0), (0, -1), (-1, 0), (0, 1), (1, 0))


class TestDensitySpec:
    def test_effective_density_formula(self):
        spec = DensitySpec(10, 0.10, 20, 20)
        assert spec.num_obstacles == 40
        assert spec.effective_density == pytest.approx(50 / 400)

    def test_scaling_preserves_beta_within_rounding(self):
        base = DensitySpec(10, 0.10, 20, 20)
        for n in (20, 30, 40, 60, 100):
            scaled = base.scaled_to(n)
            tol = 1.0 / (scaled.width * scaled.height)
            assert abs(scaled.effective_density - base.effective_density) <= tol

    def test_scaling_matches_known_mid_size(self):
        base = DensitySpec(10, 0.10, 20, 20)
        scaled = base.scaled_to(20)
        assert (scaled.width, scaled.height) == (28, 28)
