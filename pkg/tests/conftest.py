"""Shared test fixtures: seeded generators, tiny configs and trained runs.

Everything here is sized so the whole suite runs on a laptop CPU: environments
are shrunk where their rules allow it, training runs use two environment
instances and a handful of iterations.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping
from pathlib import Path

import numpy as np
import pytest

from marlcomm.agents import AgentParams, init_team
from marlcomm.cli import RunManifest
from marlcomm.config import ExperimentConfig
from marlcomm.envs.core import FIND_GOAL, PREDATOR_PREY, TRAFFIC_JUNCTION, EnvConfig
from marlcomm.numerics.tensor import GradTape, Tensor
from marlcomm.training import train

Build = Callable[[Mapping[str, Tensor]], Tensor]


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def check_gradients() -> Callable[..., None]:
    """Compare tape gradients of ``build(params)`` with central differences.

    ``build`` maps a dict of tensors to a scalar tensor. Every element of every
    parameter is perturbed by ``±h``.
    """

    def check(
        build: Build,
        params: Mapping[str, np.ndarray],
        h: float = 1e-5,
        rtol: float = 1e-4,
        atol: float = 1e-7,
    ) -> None:
        tape = GradTape()
        analytic = tape.backward(build(tape.watch_all(params)))

        def evaluate(arrays: Mapping[str, np.ndarray]) -> float:
            return build({k: Tensor(v) for k, v in arrays.items()}).item()

        for name, value in params.items():
            numeric = np.zeros_like(value, dtype=np.float64)
            for idx in np.ndindex(value.shape):
                plus = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
                minus = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
                plus[name][idx] += h
                minus[name][idx] -= h
                numeric[idx] = (evaluate(plus) - evaluate(minus)) / (2 * h)
            np.testing.assert_allclose(
                analytic[name], numeric, rtol=rtol, atol=atol, err_msg=name
            )

    return check


@pytest.fixture
def pp_config() -> EnvConfig:
    return EnvConfig.preset(PREDATOR_PREY)


@pytest.fixture
def fg_config() -> EnvConfig:
    """A 9x9 Find-Goal with 2 agents and short episodes."""
    return EnvConfig.preset(FIND_GOAL, grid_size=9, n_agents=2, max_steps=30)


@pytest.fixture
def tj_config() -> EnvConfig:
    return EnvConfig.preset(TRAFFIC_JUNCTION)


@pytest.fixture
def tiny_pp_config() -> EnvConfig:
    """Predator-Prey with short episodes for rollouts and evaluation tests."""
    return EnvConfig.preset(PREDATOR_PREY, max_steps=12)


def tiny_experiment(
    env: str, method: str, seed: int = 0, **overrides: object
) -> ExperimentConfig:
    """Two instances, segments of 4 steps, two iterations, one eval episode."""
    env_overrides: dict[str, object] = {"max_steps": 10}
    if env == FIND_GOAL:
        env_overrides.update(grid_size=9, n_agents=2)
    values: dict[str, object] = dict(
        env=env,
        method=method,
        seed=seed,
        total_steps=16,
        n_envs=2,
        segment_length=4,
        n_step=2,
        eval_interval=1,
        eval_episodes=1,
        checkpoint_interval=1,
        log_interval=1,
        env_overrides=env_overrides,
    )
    values.update(overrides)
    return ExperimentConfig(**values)  # type: ignore[arg-type]


@pytest.fixture
def make_experiment() -> Callable[..., ExperimentConfig]:
    return tiny_experiment


@pytest.fixture
def pp_team(tiny_pp_config: EnvConfig) -> list[AgentParams]:
    return init_team(tiny_pp_config, "cacl", seed=0)


@pytest.fixture
def fg_team(fg_config: EnvConfig) -> list[AgentParams]:
    return init_team(fg_config, "cacl", seed=0)


@pytest.fixture
def checkpoint_tree(tmp_path: Path) -> Path:
    """Two tiny trained Find-Goal runs per method (cacl, iac) under one root."""
    root = tmp_path / "runs"
    for method in ("cacl", "iac"):
        for seed in (0, 1):
            config = tiny_experiment(FIND_GOAL, method, seed=seed, total_steps=8)
            run_dir = root / config.run_name
            _write_manifest(run_dir, config)
            train(config, run_dir)
    return root


def _write_manifest(run_dir: Path, config: ExperimentConfig) -> None:
    RunManifest(config=config, output_dir=run_dir, started="test").write()
