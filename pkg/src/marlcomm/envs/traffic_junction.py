"""Traffic-Junction (easy): two one-way roads crossing at the grid centre.

Route 0 enters at the west edge and drives east along the middle row; route 1
enters at the north edge and drives south along the middle column. Each agent
slot controls at most one car with gas/brake. Cars spawn at the two arrival
points with an arrival rate drawn once per episode, and leave the grid (freeing
their slot) after the last cell of their route.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from marlcomm.envs.core import (
    GAS,
    TRAFFIC_JUNCTION,
    EnvConfig,
    EnvState,
    StepResult,
    check_actions,
    normalized_position,
    window_mask,
)

logger = logging.getLogger(__name__)

N_ROUTES = 2
INACTIVE = -1


def route_cells(route: int, grid_size: int) -> np.ndarray:
    """Cells of *route* in driving order, ``[grid_size, 2]``."""
    mid = grid_size // 2
    steps = np.arange(grid_size)
    if route == 0:
        return np.stack([np.full(grid_size, mid), steps], axis=1)
    if route == 1:
        return np.stack([steps, np.full(grid_size, mid)], axis=1)
    raise ValueError(f"route must be 0 or 1, got {route}")


@dataclass
class TrafficJunctionState(EnvState):
    routes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    progress: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    ages: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    arrival_rate: float = 0.0
    collided: bool = False


@dataclass(frozen=True)
class TJDynamics:
    """Internals of one Traffic-Junction transition."""

    exited: tuple[int, ...]
    spawned: tuple[int, ...]
    colliding: tuple[int, ...]
    team_reward: float


def reset(config: EnvConfig, seed: int) -> tuple[TrafficJunctionState, np.ndarray]:
    if config.env_id != TRAFFIC_JUNCTION:
        raise ValueError(f"traffic_junction.reset called with env {config.env_id!r}")
    rng = np.random.default_rng(seed)
    n = config.n_agents
    state = TrafficJunctionState(
        config=config,
        rng=rng,
        positions=np.zeros((n, 2), dtype=np.int64),
        active=np.zeros(n, dtype=bool),
        routes=np.full(n, INACTIVE, dtype=np.int64),
        progress=np.zeros(n, dtype=np.int64),
        ages=np.zeros(n, dtype=np.int64),
        arrival_rate=float(
            rng.uniform(config.arrival_rate_min, config.arrival_rate_max)
        ),
    )
    return state, observe_all(state)


def _sync_positions(state: TrafficJunctionState) -> None:
    size = state.config.grid_size
    for i in np.flatnonzero(state.active):
        state.positions[i] = route_cells(int(state.routes[i]), size)[state.progress[i]]


def tj_dynamics(
    state: TrafficJunctionState, actions: np.ndarray, rng: np.random.Generator
) -> TJDynamics:
    """Advance cars, spawn arrivals, detect collisions and compute the team reward.

    Order: gas moves a car one cell (leaving the grid frees the slot), then one
    spawn draw per arrival point fills the lowest free slot, then every cell
    holding two or more cars is a collision for each car on it.
    """
    config = state.config
    size = config.grid_size
    was_active = state.active.copy()

    exited: list[int] = []
    for i in np.flatnonzero(was_active):
        if actions[i] != GAS:
            continue
        state.progress[i] += 1
        if state.progress[i] >= size:
            state.active[i] = False
            state.routes[i] = INACTIVE
            state.progress[i] = 0
            state.ages[i] = 0
            exited.append(int(i))

    survivors = was_active & state.active
    state.ages[survivors] += 1

    spawned: list[int] = []
    for route in range(N_ROUTES):
        arrives = rng.random() < state.arrival_rate
        free = np.flatnonzero(~state.active)
        if not arrives or free.size == 0:
            continue
        slot = int(free[0])
        state.active[slot] = True
        state.routes[slot] = route
        state.progress[slot] = 0
        state.ages[slot] = 0
        spawned.append(slot)

    _sync_positions(state)
    active = np.flatnonzero(state.active)
    cells: dict[tuple[int, int], list[int]] = {}
    for i in active:
        cell = (int(state.positions[i][0]), int(state.positions[i][1]))
        cells.setdefault(cell, []).append(int(i))
    colliding = sorted(i for group in cells.values() if len(group) > 1 for i in group)

    team_reward = config.collision_penalty * len(colliding)
    team_reward += config.time_penalty * float(state.ages[active].sum())
    return TJDynamics(
        tuple(exited), tuple(spawned), tuple(colliding), float(team_reward)
    )


def step(state: TrafficJunctionState, actions: Any) -> StepResult:
    """Apply gas/brake per slot; actions of empty slots are ignored.

    Slots that held a car at the start of the step receive the team reward;
    the others receive 0.
    """
    if state.done:
        raise ValueError("step called on a finished episode; reset first")
    config = state.config
    joint = check_actions(config, actions)
    was_active = state.active.copy()
    state.step_count += 1

    dynamics = tj_dynamics(state, joint, state.rng)
    if dynamics.colliding:
        state.collided = True
    state.done = state.step_count >= config.max_steps

    rewards = np.where(was_active, dynamics.team_reward, 0.0)
    info: dict[str, Any] = {
        "team_reward": dynamics.team_reward,
        "collisions": len(dynamics.colliding),
        "spawned": len(dynamics.spawned),
        "exited": len(dynamics.exited),
    }
    if state.done:
        info["success"] = not state.collided
    return StepResult(
        observations=observe_all(state), rewards=rewards, done=state.done, info=info
    )


def observe(state: TrafficJunctionState, agent: int) -> np.ndarray:
    """Other-car occupancy (9), own normalised position (2), route one-hot (2).

    Empty slots observe all zeros.
    """
    config = state.config
    if not state.active[agent]:
        return np.zeros(config.obs_dim)
    center = state.positions[agent]
    others = state.positions[state.active & (np.arange(config.n_agents) != agent)]
    route = np.zeros(N_ROUTES)
    route[state.routes[agent]] = 1.0
    return np.concatenate(
        [
            window_mask(center, others, config.vision).ravel(),
            normalized_position(center, config.grid_size),
            route,
        ]
    )


def observe_all(state: TrafficJunctionState) -> np.ndarray:
    return np.stack([observe(state, i) for i in range(state.config.n_agents)])


def visibility(state: TrafficJunctionState, agent: int) -> dict[str, Any]:
    visible = bool(state.active[agent]) and bool(observe(state, agent)[:9].any())
    return {"goal_visible": False, "other_agent_visible": visible, "goal_region": ""}


def state_summary(state: TrafficJunctionState) -> dict[str, Any]:
    return {
        "step": state.step_count,
        "cars": state.positions.tolist(),
        "active": state.active.tolist(),
        "routes": state.routes.tolist(),
        "arrival_rate": state.arrival_rate,
    }
