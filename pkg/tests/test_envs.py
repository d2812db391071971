"""Tests for marlcomm.envs — gridworld rules and reproducibility."""

from __future__ import annotations

import itertools
from dataclasses import replace

import numpy as np
import pytest
from scipy import ndimage

from marlcomm import envs
from marlcomm.envs.core import (
    BRAKE,
    FIND_GOAL,
    GAS,
    MOVES,
    NOOP,
    PREDATOR_PREY,
    TRAFFIC_JUNCTION,
    EnvConfig,
    resolve_env_id,
)
from marlcomm.envs.find_goal import FindGoalState, goal_region
from marlcomm.envs.predator_prey import (
    PredatorPreyState,
    pp_capture_check,
    prey_move,
    sample_prey_actions,
)
from marlcomm.envs.traffic_junction import route_cells

LEFT, RIGHT, UP, DOWN = 0, 1, 2, 3


def _pp_state(
    config: EnvConfig, predators: list[tuple[int, int]], prey: list[tuple[int, int]]
) -> PredatorPreyState:
    return PredatorPreyState(
        config=config,
        rng=np.random.default_rng(0),
        positions=np.array(predators, dtype=np.int64),
        active=np.ones(len(predators), dtype=bool),
        prey_positions=np.array(prey, dtype=np.int64),
        prey_alive=np.ones(len(prey), dtype=bool),
    )


def _fg_state(
    config: EnvConfig,
    agents: list[tuple[int, int]],
    goal: tuple[int, int],
    obstacles: tuple[tuple[int, int], ...] = (),
) -> FindGoalState:
    grid = np.zeros((config.grid_size, config.grid_size), dtype=bool)
    for r, c in obstacles:
        grid[r, c] = True
    return FindGoalState(
        config=config,
        rng=np.random.default_rng(0),
        positions=np.array(agents, dtype=np.int64),
        active=np.ones(len(agents), dtype=bool),
        obstacles=grid,
        goal=np.array(goal, dtype=np.int64),
        reached=np.zeros(len(agents), dtype=bool),
    )


def _place_car(state, slot: int, route: int, progress: int) -> None:
    state.active[slot] = True
    state.routes[slot] = route
    state.progress[slot] = progress
    state.ages[slot] = 0
    state.positions[slot] = route_cells(route, state.config.grid_size)[progress]


class TestEnvConfig:
    def test_presets(self):
        pp = EnvConfig.preset("pp")
        fg = EnvConfig.preset("fg")
        tj = EnvConfig.preset("tj")
        assert (pp.grid_size, pp.n_agents, pp.max_steps, pp.n_prey) == (7, 4, 200, 2)
        assert (fg.grid_size, fg.n_agents, fg.max_steps) == (15, 3, 512)
        assert fg.obstacle_density == 0.15
        assert (tj.grid_size, tj.n_agents, tj.max_steps) == (7, 5, 20)
        assert (tj.arrival_rate_min, tj.arrival_rate_max) == (0.1, 0.3)

    def test_observation_dims(self, pp_config, tj_config):
        assert pp_config.obs_dim == 11
        assert EnvConfig.preset(FIND_GOAL).obs_dim == 29
        assert tj_config.obs_dim == 13
        assert tj_config.n_actions == 2
        assert pp_config.n_actions == 5

    @pytest.mark.parametrize(
        "overrides, match",
        [
            ({"vision": 2}, "vision"),
            ({"grid_size": 2}, "grid_size"),
            ({"n_agents": 1}, "n_agents"),
            ({"max_steps": 0}, "max_steps"),
            ({"prey_move_probs": (0.5, 0.5, 0.5, 0.0, 0.0)}, "sum to 1"),
        ],
    )
    def test_invalid(self, overrides, match):
        with pytest.raises(ValueError, match=match):
            EnvConfig.preset(PREDATOR_PREY, **overrides)

    def test_aliases(self):
        assert resolve_env_id("pp") == PREDATOR_PREY
        assert resolve_env_id("traffic_junction") == TRAFFIC_JUNCTION
        with pytest.raises(ValueError, match="Unknown environment"):
            resolve_env_id("mpe")


class TestDeterminism:
    @pytest.mark.parametrize("env_id", [PREDATOR_PREY, FIND_GOAL, TRAFFIC_JUNCTION])
    def test_same_seed_same_trajectory(self, env_id):
        config = EnvConfig.preset(env_id, max_steps=15)
        actions = np.random.default_rng(3).integers(
            0, config.n_actions, size=(15, config.n_agents)
        )

        def rollout():
            state, obs = envs.reset(config, seed=42)
            history = [obs]
            for joint in actions:
                result = envs.step(state, joint)
                history.extend([result.observations, result.rewards])
                if result.done:
                    break
            return history

        for a, b in zip(rollout(), rollout(), strict=True):
            np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("env_id", [PREDATOR_PREY, FIND_GOAL, TRAFFIC_JUNCTION])
    def test_episode_length_bounded(self, env_id):
        config = EnvConfig.preset(env_id, max_steps=12)
        rng = np.random.default_rng(0)
        state, _ = envs.reset(config, seed=1)
        done = False
        while not done:
            actions = rng.integers(0, config.n_actions, config.n_agents)
            result = envs.step(state, actions)
            done = result.done
        assert state.step_count <= 12
        assert "success" in result.info
        with pytest.raises(ValueError, match="finished"):
            envs.step(state, np.zeros(config.n_agents, dtype=int))

    @pytest.mark.parametrize(
        "actions, match",
        [([0, 1, 5, 0], "illegal"), ([0, 1, -1, 0], "illegal"), ([0, 1], "expected")],
    )
    def test_illegal_actions(self, pp_config, actions, match):
        state, _ = envs.reset(pp_config, seed=0)
        with pytest.raises(ValueError, match=match):
            envs.step(state, np.array(actions))

    def test_trajectory_record(self, pp_config):
        state, obs = envs.reset(pp_config, seed=0)
        layout = envs.state_summary(state)
        actions = np.zeros(4, dtype=int)
        envs.step(state, actions)
        record = envs.trajectory_record(
            0, 0, layout, obs, actions, np.zeros(4), np.zeros((4, 4))
        )
        assert record["t"] == 0
        assert record["state"] == layout
        assert set(record) == {
            "episode", "t", "state", "observations", "actions", "rewards", "messages"
        }
        assert len(record["observations"]) == 4
        assert record["state"]["prey_alive"] == [True, True]


class TestCaptureRule:
    def test_interior_capture(self, pp_config):
        state = _pp_state(pp_config, [(2, 3), (4, 3), (3, 2), (3, 4)], [(3, 3), (0, 6)])
        events = pp_capture_check(state)
        assert events.captured == (0,)
        assert events.reward_delta == pytest.approx(10.0)
        assert state.prey_alive.tolist() == [False, True]

    def test_corner_capture(self, pp_config):
        state = _pp_state(pp_config, [(0, 1), (1, 0), (6, 6), (5, 6)], [(0, 0), (3, 3)])
        events = pp_capture_check(state)
        assert events.captured == (0,)
        assert events.failed_attempts == ()

    def test_single_adjacent_predator_is_failed_attempt(self, pp_config):
        state = _pp_state(pp_config, [(2, 3), (6, 6), (6, 0), (0, 6)], [(3, 3), (0, 0)])
        events = pp_capture_check(state)
        assert events.captured == ()
        assert events.failed_attempts == (0,)
        assert events.reward_delta == pytest.approx(-0.5)
        assert state.prey_alive.all()

    @pytest.mark.parametrize("prey", [(2, 2), (0, 0), (0, 2)])
    def test_matches_exhaustive_oracle(self, prey):
        """All placements of 4 predators on a 5x5 grid around one prey."""
        config = EnvConfig.preset(PREDATOR_PREY, grid_size=5, n_prey=1)
        cells = [(r, c) for r in range(5) for c in range(5) if (r, c) != prey]
        for placement in itertools.combinations(cells, 4):
            occupied = set(placement)
            legal_moves = [
                (prey[0] + dr, prey[1] + dc)
                for dr, dc in MOVES[:4]
                if 0 <= prey[0] + dr < 5 and 0 <= prey[1] + dc < 5
                and (prey[0] + dr, prey[1] + dc) not in occupied
            ]
            state = _pp_state(config, list(placement), [prey])
            events = pp_capture_check(state)
            assert (events.captured == (0,)) == (not legal_moves), placement


class TestPredatorPrey:
    def test_prey_move_frequencies(self, pp_config):
        moves = sample_prey_actions(
            np.random.default_rng(0), pp_config.prey_move_probs, 100_000
        )
        freqs = np.bincount(moves, minlength=5) / moves.size
        np.testing.assert_allclose(freqs, pp_config.prey_move_probs, atol=0.01)

    def test_surrounded_prey_stays(self, pp_config):
        state = _pp_state(pp_config, [(2, 3), (4, 3), (3, 2), (3, 4)], [(3, 3), (0, 0)])
        state.prey_alive[1] = False
        for seed in range(20):
            prey_move(state, np.random.default_rng(seed))
            assert state.prey_positions[0].tolist() == [3, 3]

    def test_predators_block_each_other_and_walls(self, pp_config):
        state = _pp_state(pp_config, [(0, 0), (0, 1), (6, 6), (6, 4)], [(3, 3), (3, 2)])
        result = envs.step(state, np.array([RIGHT, NOOP, DOWN, UP]))
        assert state.positions.tolist() == [[0, 0], [0, 1], [6, 6], [5, 4]]
        np.testing.assert_allclose(result.rewards, np.full(4, -0.01))
        assert result.info["team_reward"] == pytest.approx(-0.01)

    def test_other_predators_not_observed(self, pp_config):
        state = _pp_state(pp_config, [(3, 3), (0, 0), (6, 6), (6, 0)], [(2, 2), (0, 6)])
        alone = envs.observe(state, 0)
        state.positions[1] = [3, 4]
        np.testing.assert_array_equal(envs.observe(state, 0), alone)
        # prey at (2, 2) is up-left of (3, 3)
        assert alone[2:].reshape(3, 3)[0, 0] == 1.0
        assert alone[2:].sum() == 1.0
        np.testing.assert_allclose(alone[:2], [0.5, 0.5])


class TestFindGoal:
    def test_reset_reachable_and_density(self):
        config = EnvConfig.preset(FIND_GOAL)
        structure = ndimage.generate_binary_structure(2, 1)
        fractions = []
        for seed in range(40):
            state, obs = envs.reset(config, seed=seed)
            labels, _ = ndimage.label(~state.obstacles, structure=structure)
            ids = {labels[tuple(p)] for p in state.positions}
            ids.add(labels[tuple(state.goal)])
            assert len(ids) == 1 and 0 not in ids
            assert obs.shape == (3, 29)
            fractions.append(state.obstacles.mean())
        assert np.mean(fractions) == pytest.approx(0.15, abs=0.03)

    def test_pinned_goal(self, fg_config):
        state, _ = envs.reset(fg_config, seed=5, goal=(1, 1))
        assert state.goal.tolist() == [1, 1]
        assert not state.obstacles[1, 1]
        with pytest.raises(ValueError, match="outside"):
            envs.reset(fg_config, seed=5, goal=(20, 1))

    def test_arrival_and_completion_rewards(self):
        config = EnvConfig.preset(FIND_GOAL, grid_size=5, n_agents=2, max_steps=10)
        state = _fg_state(config, [(2, 1), (1, 2)], goal=(2, 2))

        first = envs.step(state, np.array([RIGHT, NOOP]))
        np.testing.assert_allclose(first.rewards, [0.99, -0.01])
        assert not first.done

        second = envs.step(state, np.array([LEFT, DOWN]))
        # agent 0 stays pinned on the goal
        assert state.positions.tolist() == [[2, 2], [2, 2]]
        np.testing.assert_allclose(second.rewards, [4.99, 5.99])
        assert second.done
        assert second.info["success"] is True

    def test_obstacles_block(self):
        config = EnvConfig.preset(FIND_GOAL, grid_size=5, n_agents=2, max_steps=10)
        state = _fg_state(config, [(0, 0), (4, 4)], goal=(2, 2), obstacles=((0, 1),))
        envs.step(state, np.array([RIGHT, DOWN]))
        assert state.positions.tolist() == [[0, 0], [4, 4]]

    def test_observation_channels(self):
        config = EnvConfig.preset(FIND_GOAL, grid_size=5, n_agents=2, max_steps=10)
        state = _fg_state(config, [(0, 0), (1, 1)], goal=(4, 4))
        channels = envs.observe(state, 0)[:27].reshape(3, 3, 3)
        # outside the grid reads as obstacle
        assert channels[0, 0].tolist() == [1.0, 1.0, 1.0]
        assert channels[1, 2, 2] == 1.0
        assert not channels[2].any()
        info = envs.visibility(state, 0)
        assert info["goal_visible"] is False
        assert info["other_agent_visible"] is True
        assert info["goal_region"] == "Middle"

    @pytest.mark.parametrize(
        "goal, region",
        [
            ((7, 7), "Middle"),
            ((5, 9), "Middle"),
            ((1, 1), "TL"),
            ((1, 13), "TR"),
            ((13, 1), "BL"),
            ((13, 13), "BR"),
            ((7, 1), "TL"),
        ],
    )
    def test_goal_region(self, goal, region):
        assert goal_region(np.array(goal), 15) == region


class TestTrafficJunction:
    def test_reset_is_empty(self, tj_config):
        state, obs = envs.reset(tj_config, seed=0)
        assert state.step_count == 0
        assert not state.active.any()
        assert not obs.any()
        low, high = tj_config.arrival_rate_min, tj_config.arrival_rate_max
        assert low <= state.arrival_rate <= high

    def test_braking_car_never_moves(self, tj_config):
        config = replace(tj_config, arrival_rate_min=0.0, arrival_rate_max=0.0)
        state, _ = envs.reset(config, seed=0)
        _place_car(state, 0, route=0, progress=1)
        brake = np.full(5, BRAKE)
        for t in range(1, 6):
            result = envs.step(state, brake)
            assert state.positions[0].tolist() == [3, 1]
            assert result.rewards[0] == pytest.approx(-0.01 * t)
            assert result.rewards[1:].tolist() == [0.0] * 4

    def test_collision_penalty(self, tj_config):
        config = replace(tj_config, arrival_rate_min=0.0, arrival_rate_max=0.0)
        state, _ = envs.reset(config, seed=0)
        _place_car(state, 0, route=0, progress=2)
        _place_car(state, 1, route=1, progress=2)
        result = envs.step(state, np.full(5, GAS))
        assert state.positions[0].tolist() == state.positions[1].tolist() == [3, 3]
        assert result.info["collisions"] == 2
        expected = -10.0 * 2 - 0.01 * 2
        np.testing.assert_allclose(result.rewards, [expected, expected, 0, 0, 0])

    def test_spawn_at_arrival_points(self, tj_config):
        config = replace(tj_config, arrival_rate_min=1.0, arrival_rate_max=1.0)
        state, _ = envs.reset(config, seed=0)
        result = envs.step(state, np.full(5, BRAKE))
        assert result.info["spawned"] == 2
        assert state.active.tolist() == [True, True, False, False, False]
        assert state.positions[:2].tolist() == [[3, 0], [0, 3]]

    def test_spawn_suppressed_when_slots_full(self, tj_config):
        config = replace(tj_config, arrival_rate_min=1.0, arrival_rate_max=1.0)
        state, _ = envs.reset(config, seed=0)
        layout = [(0, 0), (0, 2), (0, 5), (1, 1), (1, 5)]
        for slot, (route, progress) in enumerate(layout):
            _place_car(state, slot, route, progress)
        result = envs.step(state, np.full(5, BRAKE))
        assert result.info["spawned"] == 0
        assert result.info["collisions"] == 0

    def test_exit_frees_slot(self, tj_config):
        config = replace(tj_config, arrival_rate_min=0.0, arrival_rate_max=0.0)
        state, _ = envs.reset(config, seed=0)
        _place_car(state, 2, route=1, progress=6)
        result = envs.step(state, np.full(5, GAS))
        assert result.info["exited"] == 1
        assert not state.active[2]
        assert not result.observations[2].any()

    def test_observation_layout(self, tj_config):
        config = replace(tj_config, arrival_rate_min=0.0, arrival_rate_max=0.0)
        state, _ = envs.reset(config, seed=0)
        _place_car(state, 0, route=0, progress=3)
        _place_car(state, 1, route=1, progress=2)
        obs = envs.observe(state, 0)
        assert obs.shape == (13,)
        # car 1 at (2, 3) is directly above (3, 3)
        assert obs[:9].reshape(3, 3)[0, 1] == 1.0
        np.testing.assert_allclose(obs[9:11], [0.5, 0.5])
        assert obs[11:].tolist() == [1.0, 0.0]
        assert envs.visibility(state, 0)["other_agent_visible"] is True
