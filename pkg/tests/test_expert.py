import numpy as np
import pytest

from mapfgnn.errors import PlanInfeasible, TooLarge, Unreachable
from mapfgnn.expert import (
    Constraint,
    bfs_distances,
    cbs_solve,
    detect_first_conflict,
    joint_bfs_oracle,
    low_level_search,
    plan_to_labels,
    validate_plan,
)
from mapfgnn.gridworld import (
    Case,
    GridMap,
    generate_case,
    generate_map,
    step_positions,
)


def empty_map(w, h):
    return GridMap(w, h, frozenset())


class TestLowLevelSearch:
    def test_straight_line_cost(self):
        m = empty_map(5, 5)
        path = low_level_search(m, (0, 0), (0, 3))
        assert len(path) - 1 == 3
        assert path[0] == (0, 0) and path[-1] == (0, 3)

    def test_vertex_constraint_forces_one_wait(self):
        m = empty_map(5, 5)
        con = Constraint(0, "vertex", ((0, 1),), 1)
        path = low_level_search(m, (0, 0), (0, 3), [con])
        assert len(path) - 1 == 4
        assert path[1] != (0, 1)

    def test_goal_enclosed_raises(self):
        m = GridMap(5, 5, frozenset({(3, 2), (2, 3), (4, 3), (3, 4)}))
        with pytest.raises(Unreachable):
            low_level_search(m, (0, 0), (3, 3))

    def test_edge_constraint_blocks_traversal(self):
        m = empty_map(4, 1)
        con = Constraint(0, "edge", ((0, 0), (1, 0)), 1)
        path = low_level_search(m, (0, 0), (3, 0), [con])
        assert len(path) - 1 == 4
        assert path[0] == (0, 0) and path[1] == (0, 0)

    def test_goal_constraint_delays_arrival(self):
        m = empty_map(5, 1)
        con = Constraint(0, "vertex", ((2, 0),), 5)
        path = low_level_search(m, (0, 0), (2, 0), [con])
        assert len(path) - 1 >= 6
        assert path[-1] == (2, 0)

    def test_path_steps_are_unit_moves(self):
        m = generate_map(8, 8, 0.2, seed=1)
        goal = m.free_cells()[-1]
        dist = bfs_distances(m, goal)
        start = next(c for c in m.free_cells() if c in dist)
        path = low_level_search(m, start, goal)
        for a, b in zip(path, path[1:]):
            assert abs(a[0] - b[0]) + abs(a[1] - b[1]) <= 1

    def test_monotone_under_added_constraints(self):
        m = empty_map(6, 6)
        cons = []
        prev_cost = len(low_level_search(m, (0, 0), (5, 5))) - 1
        for t in (1, 2, 3):
            cons.append(Constraint(0, "vertex", ((t, 0),), t))
            cost = len(low_level_search(m, (0, 0), (5, 5), cons)) - 1
            assert cost >= prev_cost
            prev_cost = cost


class TestDetectFirstConflict:
    def test_vertex_conflict(self):
        paths = [
            [(0, 0), (1, 0), (1, 1)],
            [(2, 2), (2, 1), (1, 1)],
        ]
        c = detect_first_conflict(paths)
        assert c.kind == "vertex"
        assert c.time == 2
        assert c.robots == (0, 1)
        assert c.cells == ((1, 1),)

    def test_edge_conflict_reported_at_arrival(self):
        paths = [
            [(0, 0), (0, 1)],
            [(0, 1), (0, 0)],
        ]
        c = detect_first_conflict(paths)
        assert c.kind == "edge"
        assert c.time == 1
        assert c.cells == ((0, 0), (0, 1))

    def test_disjoint_paths_clean(self):
        paths = [
            [(0, 0), (1, 0)],
            [(3, 3), (3, 2)],
        ]
        assert detect_first_conflict(paths) is None

    def test_vertex_beats_edge_at_equal_time(self):
        # robots 0,1 swap arriving t=1 while robots 2,3 collide at t=1
        paths = [
            [(0, 0), (0, 1)],
            [(0, 1), (0, 0)],
            [(5, 5), (5, 6)],
            [(5, 7), (5, 6)],
        ]
        c = detect_first_conflict(paths)
        assert c.kind == "vertex"
        assert c.robots == (2, 3)

    def test_finished_robot_occupies_its_goal(self):
        paths = [
            [(1, 1)],
            [(3, 1), (2, 1), (1, 1)],
        ]
        c = detect_first_conflict(paths)
        assert c.kind == "vertex"
        assert c.time == 2
        assert c.cells == ((1, 1),)


class TestCbsSolve:
    def test_single_robot_shortest_path(self):
        m = empty_map(20, 20)
        case = Case("m", ((0, 0),), ((3, 0),))
        plan = cbs_solve(m, case)
        assert plan.flowtime == 3
        assert plan.makespan == 3

    def test_corridor_swap_with_passing_bay(self):
        # 3x1 corridor with one side cell above the middle
        m = GridMap(3, 2, frozenset({(0, 1), (2, 1)}))
        case = Case("m", ((0, 0), (2, 0)), ((2, 0), (0, 0)))
        plan = cbs_solve(m, case)
        oracle = joint_bfs_oracle(m, case)
        assert plan.flowtime == oracle.flowtime
        validate_plan(m, case, plan)

    def test_bare_corridor_swap_infeasible(self):
        m = empty_map(2, 1)
        case = Case("m", ((0, 0), (1, 0)), ((1, 0), (0, 0)))
        with pytest.raises(PlanInfeasible):
            cbs_solve(m, case)

    def test_solution_is_collision_free(self):
        m = generate_map(8, 8, 0.1, seed=3)
        case = generate_case(m, 4, seed=7)
        plan = cbs_solve(m, case)
        assert detect_first_conflict(plan.paths) is None
        validate_plan(m, case, plan)

    def test_deterministic(self):
        m = generate_map(8, 8, 0.1, seed=4)
        case = generate_case(m, 4, seed=2)
        assert cbs_solve(m, case) == cbs_solve(m, case)

    def test_resting_robot_forces_detour(self):
        # robot 1 parks on robot 0's straight line; detour adds 2 steps
        m = empty_map(5, 3)
        case = Case("m", ((0, 1), (2, 0)), ((4, 1), (2, 1)))
        plan = cbs_solve(m, case)
        oracle = joint_bfs_oracle(m, case)
        assert plan.flowtime == oracle.flowtime
        validate_plan(m, case, plan)


class TestJointOracle:
    def test_single_robot_matches_low_level(self):
        m = generate_map(5, 5, 0.1, seed=6)
        case = generate_case(m, 1, seed=1)
        plan = joint_bfs_oracle(m, case)
        path = low_level_search(m, case.starts[0], case.goals[0])
        assert plan.flowtime == len(path) - 1

    def test_crossing_diagonals_matches_cbs(self):
        m = empty_map(3, 3)
        case = Case("m", ((0, 0), (2, 0)), ((2, 2), (0, 2)))
        oracle = joint_bfs_oracle(m, case)
        plan = cbs_solve(m, case)
        assert oracle.flowtime == plan.flowtime == 8
        validate_plan(m, case, oracle)

    def test_bare_swap_infeasible(self):
        m = empty_map(2, 1)
        case = Case("m", ((0, 0), (1, 0)), ((1, 0), (0, 0)))
        with pytest.raises(PlanInfeasible):
            joint_bfs_oracle(m, case)

    def test_state_bound_enforced(self):
        m = empty_map(30, 30)
        case = Case(
            "m",
            ((0, 0), (5, 5), (10, 10), (15, 15)),
            ((1, 1), (6, 6), (11, 11), (16, 16)),
        )
        with pytest.raises(TooLarge):
            joint_bfs_oracle(m, case)

    def test_flowtime_equals_path_costs(self):
        m = generate_map(5, 5, 0.1, seed=9)
        case = generate_case(m, 2, seed=3)
        plan = joint_bfs_oracle(m, case)
        assert plan.flowtime == sum(len(p) - 1 for p in plan.paths)
        validate_plan(m, case, plan)

    def test_matches_cbs_on_random_small_instances(self):
        hits = 0
        for seed in range(12):
            m = generate_map(4, 4, 0.1, seed=seed)
            try:
                case = generate_case(m, 2, seed=seed)
            except Exception:
                continue
            oracle = joint_bfs_oracle(m, case)
            plan = cbs_solve(m, case)
            assert plan.flowtime == oracle.flowtime, f"seed {seed}"
            hits += 1
        assert hits >= 8


class TestPlanLabels:
    def test_up_move_label(self):
        plan = cbs_solve(empty_map(3, 3), Case("m", ((2, 2),), ((2, 1),)))
        labels = plan_to_labels(plan)
        assert labels.shape == (1, 1)
        assert labels[0, 0] == 1

    def test_early_finisher_idles(self):
        m = empty_map(6, 1)
        case = Case("m", ((0, 0), (2, 0)), ((1, 0), (5, 0)))
        plan = cbs_solve(m, case)
        labels = plan_to_labels(plan)
        assert labels.shape[0] == plan.makespan
        assert (labels[1:, 0] == 0).all()

    def test_replay_reproduces_paths(self):
        m = generate_map(8, 8, 0.15, seed=11)
        case = generate_case(m, 4, seed=5)
        plan = cbs_solve(m, case)
        labels = plan_to_labels(plan)
        positions = list(case.starts)
        replayed = [[p] for p in positions]
        for t in range(labels.shape[0]):
            positions = step_positions(m, positions, labels[t])
            for i, p in enumerate(positions):
                replayed[i].append(p)
        for i, path in enumerate(plan.paths):
            assert tuple(replayed[i][: len(path)]) == path
            assert all(p == path[-1] for p in replayed[i][len(path) :])


class TestValidatePlan:
    def test_accepts_solver_output(self):
        m = generate_map(7, 7, 0.1, seed=2)
        case = generate_case(m, 3, seed=8)
        validate_plan(m, case, cbs_solve(m, case))

    def test_rejects_teleport(self):
        m = empty_map(5, 5)
        case = Case("m", ((0, 0),), ((2, 0),))
        from mapfgnn.expert import Plan

        bad = Plan(paths=(((0, 0), (2, 0)),), flowtime=1, makespan=1)
        with pytest.raises(ValueError):
            validate_plan(m, case, bad)

    def test_rejects_vertex_collision(self):
        m = empty_map(5, 5)
        case = Case("m", ((0, 0), (2, 0)), ((1, 0), (1, 0)))
        from mapfgnn.expert import Plan

        bad = Plan(
            paths=(((0, 0), (1, 0)), ((2, 0), (1, 0))), flowtime=2, makespan=1
        )
        with pytest.raises(ValueError):
            validate_plan(m, case, bad)
