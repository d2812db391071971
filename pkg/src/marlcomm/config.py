"""Experiment configuration: defaults, presets, ``key = value`` files.

Resolution order (later wins): built-in defaults, ``--preset``, ``--config``
file, explicit command-line flags. Keys are the field names of
:class:`ExperimentConfig` plus those of :class:`~marlcomm.envs.core.EnvConfig`
(the latter become environment overrides)::

    # fg-desk.cfg
    method = cacl
    kappa = 1.0
    window = 3
    grid_size = 9
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from marlcomm.agents import CACL_METHODS, check_method
from marlcomm.comm_losses import CONTRASTIVE_MODES, ContrastiveConfig
from marlcomm.envs.core import (
    FIND_GOAL,
    PREDATOR_PREY,
    TRAFFIC_JUNCTION,
    EnvConfig,
    resolve_env_id,
)

logger = logging.getLogger(__name__)

# Environment steps of the published runs.
FULL_BUDGETS = {
    PREDATOR_PREY: 30_000_000,
    FIND_GOAL: 40_000_000,
    TRAFFIC_JUNCTION: 20_000_000,
}

# Desk-scale runs: smaller budgets, Find-Goal shrunk to 9x9 with 2 agents.
PRESETS: dict[str, dict[str, dict[str, Any]]] = {
    "full": {env: {"total_steps": steps} for env, steps in FULL_BUDGETS.items()},
    "desk": {
        PREDATOR_PREY: {"total_steps": 1_000_000},
        FIND_GOAL: {"total_steps": 1_000_000, "grid_size": 9, "n_agents": 2},
        TRAFFIC_JUNCTION: {"total_steps": 2_000_000},
    },
}


_NON_NEGATIVE = (
    "lr",
    "adam_eps",
    "gamma",
    "entropy_coef",
    "value_coef",
    "grad_clip",
    "kappa",
    "pl_coef",
    "aecomm_coef",
)


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one training run.

    ``total_steps = 0`` selects the published budget of the environment.
    ``env_overrides`` holds :class:`EnvConfig` fields that differ from the
    environment preset.
    """

    env: str = PREDATOR_PREY
    method: str = "cacl"
    seed: int = 0
    total_steps: int = 0
    n_envs: int = 12
    segment_length: int = 20
    n_step: int = 5
    lr: float = 3e-4
    adam_eps: float = 1e-3
    gamma: float = 0.99
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    grad_clip: float = 2500.0
    temperature: float = 0.1
    kappa: float = 0.5
    window: int = 5
    contrastive: str = "supcon"
    pl_coef: float = 0.01
    aecomm_coef: float = 1.0
    eval_interval: int = 100
    eval_episodes: int = 12
    checkpoint_interval: int = 500
    log_interval: int = 10
    env_overrides: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "env", resolve_env_id(self.env))
            check_method(self.method)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.total_steps == 0:
            object.__setattr__(self, "total_steps", FULL_BUDGETS[self.env])
        for name in _NON_NEGATIVE:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.gamma > 1:
            raise ConfigError(f"gamma must be <= 1, got {self.gamma}")
        positive = (
            "n_envs", "segment_length", "n_step", "total_steps", "eval_episodes"
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.method in CACL_METHODS and self.n_envs < 2:
            raise ConfigError(
                f"{self.method} needs n_envs >= 2 (negatives come from other "
                f"trajectories), got {self.n_envs}"
            )
        if self.contrastive not in CONTRASTIVE_MODES:
            raise ConfigError(
                f"contrastive must be one of {CONTRASTIVE_MODES}, "
                f"got {self.contrastive!r}"
            )
        unknown = set(self.env_overrides) - set(EnvConfig.field_names())
        if unknown:
            raise ConfigError(f"Unknown environment keys: {sorted(unknown)}")
        # Surface env/contrastive validation errors as configuration errors.
        self.env_config()
        self.contrastive_config()

    def env_config(self) -> EnvConfig:
        try:
            return EnvConfig.preset(self.env, **self.env_overrides)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid environment settings: {e}") from None

    def contrastive_config(self) -> ContrastiveConfig:
        try:
            return ContrastiveConfig(
                window=self.window,
                temperature=self.temperature,
                kappa=self.kappa,
                mode=self.contrastive,
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @property
    def steps_per_iteration(self) -> int:
        return self.n_envs * self.segment_length

    @property
    def n_iterations(self) -> int:
        return -(-self.total_steps // self.steps_per_iteration)

    @property
    def run_name(self) -> str:
        return f"env-{self.env}_method-{self.method}_seed-{self.seed}"

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def content_hash(self) -> str:
        """Git blob hash of the canonical JSON form."""
        return blob_hash(canonical_json(self.to_dict()))


def canonical_json(data: Mapping[str, Any]) -> bytes:
    return json.dumps(data, sort_keys=True, separators=(",", ":")).encode()


def blob_hash(payload: bytes) -> str:
    """``sha1("blob <len>\\0" + payload)``, as ``git hash-object`` computes it."""
    header = f"blob {len(payload)}\0".encode()
    return hashlib.sha1(header + payload).hexdigest()


_EXPERIMENT_FIELDS = {
    f.name: f for f in fields(ExperimentConfig) if f.name != "env_overrides"
}
_ENV_FIELDS = {f.name: f for f in fields(EnvConfig) if f.name != "env_id"}


def _coerce(key: str, raw: str, kind: Any) -> Any:
    kind = str(kind)
    text = raw.strip()
    try:
        if kind in ("int", "<class 'int'>"):
            return int(text)
        if kind in ("float", "<class 'float'>"):
            return float(text)
        if kind.startswith("tuple"):
            return tuple(float(v) for v in text.strip("()[]").split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return text


def parse_config_text(text: str, source: str = "<string>") -> dict[str, Any]:
    """Parse ``key = value`` lines into typed values.

    Returns a flat mapping; environment keys are nested under
    ``"env_overrides"``.
    """
    values: dict[str, Any] = {}
    env_values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(
                f"{source}:{lineno}: expected 'key = value', got {line!r}"
            )
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key in _EXPERIMENT_FIELDS:
            values[key] = _coerce(key, raw, _EXPERIMENT_FIELDS[key].type)
        elif key in _ENV_FIELDS:
            env_values[key] = _coerce(key, raw, _ENV_FIELDS[key].type)
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
    if env_values:
        values["env_overrides"] = env_values
    return values


def load_config_file(path: Path) -> dict[str, Any]:
    return parse_config_text(path.read_text(), source=str(path))


def build_config(
    env: str,
    method: str,
    preset: str | None = None,
    config_file: Path | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> ExperimentConfig:
    """Resolve defaults < preset < file < overrides into an :class:`ExperimentConfig`.

    ``None`` values in *overrides* mean "not given on the command line".
    """
    try:
        env_id = resolve_env_id(env)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    values: dict[str, Any] = {"env": env_id, "method": method}
    env_values: dict[str, Any] = {}

    layers: list[dict[str, Any]] = []
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(
                f"Unknown preset {preset!r}; expected one of {sorted(PRESETS)}"
            )
        layer = dict(PRESETS[preset][env_id])
        layers.append(
            {
                **{k: v for k, v in layer.items() if k in _EXPERIMENT_FIELDS},
                "env_overrides": {k: v for k, v in layer.items() if k in _ENV_FIELDS},
            }
        )
    if config_file is not None:
        layers.append(load_config_file(config_file))
    if overrides:
        layers.append({k: v for k, v in overrides.items() if v is not None})

    for layer in layers:
        env_values.update(layer.pop("env_overrides", {}))
        values.update(layer)
    if "env" in values:
        try:
            values["env"] = resolve_env_id(str(values["env"]))
        except ValueError as e:
            raise ConfigError(str(e)) from None
    config = ExperimentConfig(**values, env_overrides=env_values)
    logger.debug(
        "Resolved config %s (hash %s)", config.run_name, config.content_hash()[:12]
    )
    return config


def config_from_dict(data: Mapping[str, Any]) -> ExperimentConfig:
    """Rebuild a config from :meth:`ExperimentConfig.to_dict` output."""
    known = {k: v for k, v in data.items() if k in _EXPERIMENT_FIELDS}
    overrides = dict(data.get("env_overrides", {}))
    if "prey_move_probs" in overrides:
        overrides["prey_move_probs"] = tuple(overrides["prey_move_probs"])
    return ExperimentConfig(**known, env_overrides=overrides)
