"""Predator-Prey: four predators must fully surround each of two prey.

Predators do not see each other; each observes its own normalised position
and a 3x3 window of prey flags. A prey is captured when every in-grid
orthogonal neighbour is a predator, so the grid boundary counts as a wall.
Rewards are shared by all predators.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from marlcomm.envs.core import (
    MOVES,
    PREDATOR_PREY,
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

_NEIGHBOURS = MOVES[:4]


@dataclass
class PredatorPreyState(EnvState):
    prey_positions: np.ndarray = field(
        default_factory=lambda: np.zeros((0, 2), dtype=np.int64)
    )
    prey_alive: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


@dataclass(frozen=True)
class CaptureEvents:
    """Result of one capture check."""

    captured: tuple[int, ...]
    failed_attempts: tuple[int, ...]
    reward_delta: float


def reset(config: EnvConfig, seed: int) -> tuple[PredatorPreyState, np.ndarray]:
    if config.env_id != PREDATOR_PREY:
        raise ValueError(f"predator_prey.reset called with env {config.env_id!r}")
    rng = np.random.default_rng(seed)
    grid = np.ones((config.grid_size, config.grid_size), dtype=bool)
    cells = sample_cells(rng, grid, config.n_agents + config.n_prey)
    state = PredatorPreyState(
        config=config,
        rng=rng,
        positions=cells[: config.n_agents].copy(),
        active=np.ones(config.n_agents, dtype=bool),
        prey_positions=cells[config.n_agents :].copy(),
        prey_alive=np.ones(config.n_prey, dtype=bool),
    )
    return state, observe_all(state)


def is_surrounded(
    cell: np.ndarray, predator_cells: set[tuple[int, int]], grid_size: int
) -> bool:
    """True iff every in-grid orthogonal neighbour of *cell* holds a predator."""
    for delta in _NEIGHBOURS:
        r, c = int(cell[0] + delta[0]), int(cell[1] + delta[1])
        if 0 <= r < grid_size and 0 <= c < grid_size and (r, c) not in predator_cells:
            return False
    return True


def _adjacent_predators(
    cell: np.ndarray, predator_cells: set[tuple[int, int]]
) -> int:
    return sum(
        (int(cell[0] + d[0]), int(cell[1] + d[1])) in predator_cells
        for d in _NEIGHBOURS
    )


def pp_capture_check(state: PredatorPreyState) -> CaptureEvents:
    """Remove surrounded prey and return the shared reward change.

    +capture_reward per captured prey; failed_attempt_penalty per live prey
    with at least one adjacent predator that was not captured.
    """
    config = state.config
    predators = {(int(r), int(c)) for r, c in state.positions}
    captured: list[int] = []
    failed: list[int] = []
    for k in np.flatnonzero(state.prey_alive):
        cell = state.prey_positions[k]
        if is_surrounded(cell, predators, config.grid_size):
            captured.append(int(k))
        elif _adjacent_predators(cell, predators) > 0:
            failed.append(int(k))
    for k in captured:
        state.prey_alive[k] = False
    reward = (
        config.capture_reward * len(captured)
        + config.failed_attempt_penalty * len(failed)
    )
    return CaptureEvents(tuple(captured), tuple(failed), float(reward))


def sample_prey_actions(
    rng: np.random.Generator, probs: Any, count: int
) -> np.ndarray:
    """Draw *count* moves from the prey movement distribution."""
    return rng.choice(len(MOVES), size=count, p=np.asarray(probs, dtype=float))


def prey_move(state: PredatorPreyState, rng: np.random.Generator) -> np.ndarray:
    """Move every live prey in index order and return the new prey positions.

    Moves off the grid or into a predator or another live prey resolve to
    staying in place.
    """
    config = state.config
    moves = sample_prey_actions(rng, config.prey_move_probs, config.n_prey)
    predators = {(int(r), int(c)) for r, c in state.positions}
    for k in np.flatnonzero(state.prey_alive):
        target = state.prey_positions[k] + MOVES[moves[k]]
        if not in_grid(target, config.grid_size):
            continue
        key = (int(target[0]), int(target[1]))
        others = {
            (int(r), int(c))
            for j, (r, c) in enumerate(state.prey_positions)
            if j != k and state.prey_alive[j]
        }
        if key in predators or key in others:
            continue
        state.prey_positions[k] = target
    return state.prey_positions


def _move_predators(state: PredatorPreyState, actions: np.ndarray) -> None:
    config = state.config
    prey = {
        (int(r), int(c))
        for (r, c), alive in zip(state.prey_positions, state.prey_alive)
        if alive
    }
    for i, action in enumerate(actions):
        target = state.positions[i] + MOVES[action]
        if not in_grid(target, config.grid_size):
            continue
        key = (int(target[0]), int(target[1]))
        others = {
            (int(r), int(c)) for j, (r, c) in enumerate(state.positions) if j != i
        }
        if key in others or key in prey:
            continue
        state.positions[i] = target


def step(state: PredatorPreyState, actions: Any) -> StepResult:
    if state.done:
        raise ValueError("step called on a finished episode; reset first")
    config = state.config
    joint = check_actions(config, actions)
    state.step_count += 1

    _move_predators(state, joint)
    prey_move(state, state.rng)
    events = pp_capture_check(state)

    team_reward = config.step_penalty + events.reward_delta
    all_captured = not state.prey_alive.any()
    state.done = all_captured or state.step_count >= config.max_steps
    info: dict[str, Any] = {
        "team_reward": team_reward,
        "captures": len(events.captured),
        "failed_attempts": len(events.failed_attempts),
        "prey_captured": int(config.n_prey - state.prey_alive.sum()),
    }
    if state.done:
        info["success"] = bool(all_captured)
    return StepResult(
        observations=observe_all(state),
        rewards=np.full(config.n_agents, team_reward),
        done=state.done,
        info=info,
    )


def observe(state: PredatorPreyState, agent: int) -> np.ndarray:
    """Own normalised position (2) then 3x3 prey flags (9)."""
    config = state.config
    center = state.positions[agent]
    prey = state.prey_positions[state.prey_alive]
    return np.concatenate(
        [
            normalized_position(center, config.grid_size),
            window_mask(center, prey, config.vision).ravel(),
        ]
    )


def observe_all(state: PredatorPreyState) -> np.ndarray:
    return np.stack([observe(state, i) for i in range(state.config.n_agents)])


def visibility(state: PredatorPreyState, agent: int) -> dict[str, Any]:
    center = state.positions[agent]
    others = np.delete(state.positions, agent, axis=0)
    vision = state.config.vision
    return {
        "goal_visible": bool(
            window_mask(center, state.prey_positions[state.prey_alive], vision).any()
        ),
        "other_agent_visible": bool(window_mask(center, others, vision).any()),
        "goal_region": "",
    }


def state_summary(state: PredatorPreyState) -> dict[str, Any]:
    return {
        "step": state.step_count,
        "predators": state.positions.tolist(),
        "prey": state.prey_positions.tolist(),
        "prey_alive": state.prey_alive.tolist(),
    }
