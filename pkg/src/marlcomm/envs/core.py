"""Shared environment types: configuration, state, step results and movement."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Any

import numpy as np

logger = logging.getLogger(__name__)

PREDATOR_PREY = "predator_prey"
FIND_GOAL = "find_goal"
TRAFFIC_JUNCTION = "traffic_junction"
ENV_IDS = (PREDATOR_PREY, FIND_GOAL, TRAFFIC_JUNCTION)

# Short names accepted on the command line.
ENV_ALIASES = {"pp": PREDATOR_PREY, "fg": FIND_GOAL, "tj": TRAFFIC_JUNCTION}

# (row, col) deltas for LEFT, RIGHT, UP, DOWN, NO-OP.
MOVES = np.array([[0, -1], [0, 1], [-1, 0], [1, 0], [0, 0]], dtype=np.int64)
NOOP = 4

GAS, BRAKE = 0, 1


def resolve_env_id(name: str) -> str:
    """Map ``pp``/``fg``/``tj`` or a full id to the canonical environment id."""
    env_id = ENV_ALIASES.get(name, name)
    if env_id not in ENV_IDS:
        raise ValueError(
            f"Unknown environment {name!r}; expected one of "
            f"{sorted(ENV_IDS) + sorted(ENV_ALIASES)}"
        )
    return env_id


@dataclass(frozen=True)
class EnvConfig:
    """Static description of one environment.

    Build with :meth:`preset` to get the published geometry for an env id and
    override individual fields by keyword. Reward constants are signed as they
    are applied (penalties negative).
    """

    env_id: str
    grid_size: int
    n_agents: int
    max_steps: int
    vision: int = 1
    step_penalty: float = -0.01
    # predator_prey
    n_prey: int = 2
    prey_move_probs: tuple[float, ...] = (0.175, 0.175, 0.175, 0.175, 0.3)
    capture_reward: float = 10.0
    failed_attempt_penalty: float = -0.5
    # find_goal
    obstacle_density: float = 0.15
    goal_reward: float = 1.0
    all_reached_reward: float = 5.0
    # traffic_junction
    arrival_rate_min: float = 0.1
    arrival_rate_max: float = 0.3
    collision_penalty: float = -10.0
    time_penalty: float = -0.01

    def __post_init__(self) -> None:
        if self.env_id not in ENV_IDS:
            raise ValueError(f"Unknown env_id {self.env_id!r}")
        if self.grid_size < 3:
            raise ValueError(f"grid_size must be >= 3, got {self.grid_size}")
        if self.n_agents < 2:
            raise ValueError(f"n_agents must be >= 2, got {self.n_agents}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.vision != 1:
            raise ValueError(
                f"only vision 1 (3x3 field of view) is supported, got {self.vision}"
            )
        if self.env_id == PREDATOR_PREY:
            probs = np.asarray(self.prey_move_probs, dtype=float)
            if probs.shape != (len(MOVES),) or np.any(probs < 0):
                raise ValueError(
                    f"prey_move_probs must be {len(MOVES)} non-negative values, "
                    f"got {self.prey_move_probs}"
                )
            if not np.isclose(probs.sum(), 1.0):
                raise ValueError(f"prey_move_probs must sum to 1, got {probs.sum()}")
            if self.n_prey < 1 or self.n_agents + self.n_prey > self.grid_size**2:
                raise ValueError(f"cannot place {self.n_prey} prey on this grid")
        if self.env_id == FIND_GOAL and not 0.0 <= self.obstacle_density < 1.0:
            raise ValueError(
                f"obstacle_density must be in [0, 1), got {self.obstacle_density}"
            )
        if self.env_id == TRAFFIC_JUNCTION and not (
            0.0 <= self.arrival_rate_min <= self.arrival_rate_max <= 1.0
        ):
            raise ValueError(
                "arrival rate range must satisfy 0 <= min <= max <= 1, got "
                f"[{self.arrival_rate_min}, {self.arrival_rate_max}]"
            )

    @classmethod
    def preset(cls, env_id: str, **overrides: Any) -> EnvConfig:
        env_id = resolve_env_id(env_id)
        base = dict(_PRESETS[env_id])
        base.update(overrides)
        return cls(env_id=env_id, **base)

    @property
    def fov(self) -> int:
        return 2 * self.vision + 1

    @property
    def n_actions(self) -> int:
        return 2 if self.env_id == TRAFFIC_JUNCTION else len(MOVES)

    @property
    def obs_dim(self) -> int:
        window = self.fov * self.fov
        if self.env_id == PREDATOR_PREY:
            return 2 + window
        if self.env_id == FIND_GOAL:
            return 3 * window + 2
        return window + 2 + 2

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


_PRESETS: dict[str, dict[str, Any]] = {
    PREDATOR_PREY: {"grid_size": 7, "n_agents": 4, "max_steps": 200},
    FIND_GOAL: {"grid_size": 15, "n_agents": 3, "max_steps": 512},
    TRAFFIC_JUNCTION: {"grid_size": 7, "n_agents": 5, "max_steps": 20},
}


@dataclass
class EnvState:
    """Mutable state of one environment instance.

    ``positions`` is ``[N, 2]`` (row, col); ``active`` marks agent slots that
    currently take part (always all-true outside Traffic-Junction).
    """

    config: EnvConfig
    rng: np.random.Generator
    positions: np.ndarray
    active: np.ndarray
    step_count: int = 0
    done: bool = False


@dataclass
class StepResult:
    """Outcome of one joint step.

    ``observations`` is ``[N, obs_dim]`` and ``rewards`` is ``[N]``. ``info``
    always carries ``team_reward``; at episode end it also carries ``success``.
    """

    observations: np.ndarray
    rewards: np.ndarray
    done: bool
    info: dict[str, Any] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Helpers shared by the grid worlds
# ---------------------------------------------------------------------------


def check_actions(config: EnvConfig, actions: Any) -> np.ndarray:
    """Validate a joint action and return it as an int array of shape ``[N]``."""
    arr = np.asarray(actions)
    if arr.shape != (config.n_agents,):
        raise ValueError(
            f"expected {config.n_agents} actions for {config.env_id}, "
            f"got shape {arr.shape}"
        )
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"actions must be integers, got dtype {arr.dtype}")
    bad = (arr < 0) | (arr >= config.n_actions)
    if np.any(bad):
        raise ValueError(
            f"illegal action(s) {arr[bad].tolist()} for {config.env_id}; "
            f"valid range is 0..{config.n_actions - 1}"
        )
    return arr.astype(np.int64)


def in_grid(cell: np.ndarray, grid_size: int) -> bool:
    return bool(0 <= cell[0] < grid_size and 0 <= cell[1] < grid_size)


def normalized_position(cell: np.ndarray, grid_size: int) -> np.ndarray:
    return np.asarray(cell, dtype=np.float64) / float(grid_size - 1)


def window_mask(
    center: np.ndarray, cells: np.ndarray, vision: int
) -> np.ndarray:
    """``[2v+1, 2v+1]`` flags of which *cells* fall in the window around *center*."""
    size = 2 * vision + 1
    out = np.zeros((size, size))
    for cell in np.asarray(cells, dtype=np.int64).reshape(-1, 2):
        dr, dc = cell - center
        if abs(dr) <= vision and abs(dc) <= vision:
            out[dr + vision, dc + vision] = 1.0
    return out


def sample_cells(
    rng: np.random.Generator, free: np.ndarray, count: int
) -> np.ndarray:
    """Draw *count* distinct cells from the boolean map *free* as ``[count, 2]``."""
    flat = np.flatnonzero(free)
    if flat.size < count:
        raise ValueError(f"need {count} free cells, only {flat.size} available")
    chosen = rng.choice(flat, size=count, replace=False)
    return np.stack(np.unravel_index(chosen, free.shape), axis=1).astype(np.int64)


def episode_seed(rng: np.random.Generator) -> int:
    """Seed for the next episode of an instance, drawn from its own stream."""
    return int(rng.integers(0, 2**63 - 1))
