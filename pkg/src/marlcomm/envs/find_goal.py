"""Find-Goal: agents with a 3x3 view search an obstacle map for a shared goal.

Each agent is rewarded once when it first reaches the goal, and every agent
receives a bonus when the last one arrives. Agents that have reached the goal
stay there. Obstacle maps are rejection-sampled until the goal and all agents
share one 4-connected free region.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import ndimage

from marlcomm.envs.core import (
    FIND_GOAL,
    MOVES,
    EnvConfig,
    EnvState,
    StepResult,
    check_actions,
    in_grid,
    normalized_position,
    sample_cells,
    window_mask,
)

logger = logging.getLogger(__name__)

MAX_MAP_RESAMPLES = 100
REGIONS = ("TL", "TR", "BL", "BR", "Middle")
_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass
class FindGoalState(EnvState):
    obstacles: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=bool))
    goal: np.ndarray = field(default_factory=lambda: np.zeros(2, dtype=np.int64))
    reached: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def _all_connected(free: np.ndarray, cells: np.ndarray) -> bool:
    labels, _ = ndimage.label(free, structure=_FOUR_CONNECTED)
    ids = {int(labels[r, c]) for r, c in cells}
    return len(ids) == 1 and 0 not in ids


def reset(
    config: EnvConfig, seed: int, goal: tuple[int, int] | None = None
) -> tuple[FindGoalState, np.ndarray]:
    """Sample an obstacle map, agent starts and goal.

    Parameters
    ----------
    goal
        Pin the goal to this ``(row, col)``; the cell is kept obstacle-free.

    Raises
    ------
    RuntimeError
        If no map with a reachable goal is found in ``MAX_MAP_RESAMPLES`` tries.
    """
    if config.env_id != FIND_GOAL:
        raise ValueError(f"find_goal.reset called with env {config.env_id!r}")
    size = config.grid_size
    pinned = None
    if goal is not None:
        pinned = np.asarray(goal, dtype=np.int64)
        if pinned.shape != (2,) or not in_grid(pinned, size):
            raise ValueError(f"goal {goal} is outside the {size}x{size} grid")

    rng = np.random.default_rng(seed)
    n_cells = config.n_agents + (0 if pinned is not None else 1)
    for attempt in range(1, MAX_MAP_RESAMPLES + 1):
        obstacles = rng.random((size, size)) < config.obstacle_density
        free = ~obstacles
        if pinned is not None:
            obstacles[pinned[0], pinned[1]] = False
            free = ~obstacles
            candidates = free.copy()
            candidates[pinned[0], pinned[1]] = False
        else:
            candidates = free
        if np.count_nonzero(candidates) < n_cells:
            continue
        cells = sample_cells(rng, candidates, n_cells)
        agents = cells[: config.n_agents]
        goal_cell = pinned if pinned is not None else cells[-1]
        if _all_connected(free, np.vstack([agents, goal_cell[None]])):
            logger.debug("find_goal map accepted after %d attempt(s)", attempt)
            state = FindGoalState(
                config=config,
                rng=rng,
                positions=agents.copy(),
                active=np.ones(config.n_agents, dtype=bool),
                obstacles=obstacles,
                goal=np.array(goal_cell, dtype=np.int64),
                reached=np.zeros(config.n_agents, dtype=bool),
            )
            return state, observe_all(state)
    raise RuntimeError(
        f"No find_goal map with a reachable goal after {MAX_MAP_RESAMPLES} resamples "
        f"(grid {size}, density {config.obstacle_density}, seed {seed})"
    )


def step(state: FindGoalState, actions: Any) -> StepResult:
    if state.done:
        raise ValueError("step called on a finished episode; reset first")
    config = state.config
    joint = check_actions(config, actions)
    state.step_count += 1
    goal_key = (int(state.goal[0]), int(state.goal[1]))

    rewards = np.full(config.n_agents, config.step_penalty)
    arrived = 0
    for i, action in enumerate(joint):
        if state.reached[i]:
            continue
        target = state.positions[i] + MOVES[action]
        blocked = not in_grid(target, config.grid_size)
        if blocked or state.obstacles[target[0], target[1]]:
            continue
        key = (int(target[0]), int(target[1]))
        occupied = {
            (int(r), int(c)) for j, (r, c) in enumerate(state.positions) if j != i
        }
        if key in occupied and key != goal_key:
            continue
        state.positions[i] = target
        if key == goal_key:
            state.reached[i] = True
            rewards[i] += config.goal_reward
            arrived += 1

    all_reached = bool(state.reached.all())
    if all_reached and arrived:
        rewards += config.all_reached_reward
    state.done = all_reached or state.step_count >= config.max_steps
    info: dict[str, Any] = {
        "team_reward": float(rewards.mean()),
        "arrivals": arrived,
        "reached": state.reached.copy(),
    }
    if state.done:
        info["success"] = all_reached
    return StepResult(
        observations=observe_all(state), rewards=rewards, done=state.done, info=info
    )


def _obstacle_window(state: FindGoalState, center: np.ndarray) -> np.ndarray:
    vision = state.config.vision
    padded = np.pad(state.obstacles, vision, constant_values=True)
    r, c = center + vision
    return padded[r - vision : r + vision + 1, c - vision : c + vision + 1].astype(
        np.float64
    )


def observe(state: FindGoalState, agent: int) -> np.ndarray:
    """Obstacle, other-agent and goal channels over the 3x3 window, then position.

    Channels are flattened channel-major so ``obs[:27].reshape(3, 3, 3)`` is the
    image stack. Cells outside the grid read as obstacles.
    """
    config = state.config
    center = state.positions[agent]
    others = np.delete(state.positions, agent, axis=0)
    channels = np.stack(
        [
            _obstacle_window(state, center),
            window_mask(center, others, config.vision),
            window_mask(center, state.goal, config.vision),
        ]
    )
    return np.concatenate(
        [channels.ravel(), normalized_position(center, config.grid_size)]
    )


def observe_all(state: FindGoalState) -> np.ndarray:
    return np.stack([observe(state, i) for i in range(state.config.n_agents)])


def goal_region(goal: np.ndarray, grid_size: int) -> str:
    """Coarse location label: the central 5x5 block or one of four quadrants.

    Quadrants are split at the centre cell; cells on the centre row or column
    outside the central block go to the top/left side.
    """
    center = grid_size // 2
    r, c = int(goal[0]), int(goal[1])
    if abs(r - center) <= 2 and abs(c - center) <= 2:
        return "Middle"
    vertical = "T" if r <= center else "B"
    horizontal = "L" if c <= center else "R"
    return vertical + horizontal


def visibility(state: FindGoalState, agent: int) -> dict[str, Any]:
    center = state.positions[agent]
    others = np.delete(state.positions, agent, axis=0)
    vision = state.config.vision
    return {
        "goal_visible": bool(window_mask(center, state.goal, vision).any()),
        "other_agent_visible": bool(window_mask(center, others, vision).any()),
        "goal_region": goal_region(state.goal, state.config.grid_size),
    }


def state_summary(state: FindGoalState) -> dict[str, Any]:
    return {
        "step": state.step_count,
        "agents": state.positions.tolist(),
        "goal": state.goal.tolist(),
        "reached": state.reached.tolist(),
    }
