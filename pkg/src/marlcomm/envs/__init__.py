"""Gridworld environments with seeded, bit-reproducible dynamics.

The functions here dispatch on ``config.env_id`` / ``state.config.env_id`` to
:mod:`~marlcomm.envs.predator_prey`, :mod:`~marlcomm.envs.find_goal` and
:mod:`~marlcomm.envs.traffic_junction`. ``step`` mutates the state in place.
"""

from __future__ import annotations

from types import ModuleType
from typing import Any

import numpy as np

from marlcomm.envs import find_goal, predator_prey, traffic_junction
from marlcomm.envs.core import (
    ENV_IDS,
    FIND_GOAL,
    PREDATOR_PREY,
    TRAFFIC_JUNCTION,
    EnvConfig,
    EnvState,
    StepResult,
    episode_seed,
    resolve_env_id,
)

_MODULES: dict[str, ModuleType] = {
    PREDATOR_PREY: predator_prey,
    FIND_GOAL: find_goal,
    TRAFFIC_JUNCTION: traffic_junction,
}


def _module(env_id: str) -> ModuleType:
    return _MODULES[resolve_env_id(env_id)]


def reset(config: EnvConfig, seed: int, **kwargs: Any) -> tuple[EnvState, np.ndarray]:
    """Start an episode; returns the state and ``[N, obs_dim]`` observations."""
    state, obs = _module(config.env_id).reset(config, seed, **kwargs)
    return state, obs


def step(state: EnvState, actions: Any) -> StepResult:
    result: StepResult = _module(state.config.env_id).step(state, actions)
    return result


def observe(state: EnvState, agent: int) -> np.ndarray:
    obs: np.ndarray = _module(state.config.env_id).observe(state, agent)
    return obs


def observe_all(state: EnvState) -> np.ndarray:
    obs: np.ndarray = _module(state.config.env_id).observe_all(state)
    return obs


def visibility(state: EnvState, agent: int) -> dict[str, Any]:
    """What *agent* can currently see: goal/prey, other agents, goal region."""
    info: dict[str, Any] = _module(state.config.env_id).visibility(state, agent)
    return info


def state_summary(state: EnvState) -> dict[str, Any]:
    """JSON-ready description of the entity layout."""
    summary: dict[str, Any] = _module(state.config.env_id).state_summary(state)
    return summary


def trajectory_record(
    episode: int,
    t: int,
    layout: dict[str, Any],
    observations: np.ndarray,
    actions: np.ndarray,
    rewards: np.ndarray,
    messages: np.ndarray,
) -> dict[str, Any]:
    """One JSON-lines record of the trajectory dump format.

    *t*, *layout* (from :func:`state_summary`) and *observations* describe the
    state before step *t*; *actions*, *rewards* and *messages* belong to that step.
    """
    return {
        "episode": episode,
        "t": t,
        "state": layout,
        "observations": np.asarray(observations).tolist(),
        "actions": np.asarray(actions).tolist(),
        "rewards": np.asarray(rewards).tolist(),
        "messages": np.asarray(messages).tolist(),
    }


__all__ = [
    "ENV_IDS",
    "FIND_GOAL",
    "PREDATOR_PREY",
    "TRAFFIC_JUNCTION",
    "EnvConfig",
    "EnvState",
    "StepResult",
    "episode_seed",
    "observe",
    "observe_all",
    "reset",
    "resolve_env_id",
    "state_summary",
    "step",
    "trajectory_record",
    "visibility",
]
