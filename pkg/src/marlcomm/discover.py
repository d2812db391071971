"""Discover training runs and checkpoints on disk.

This module is the sole interface between the evaluation commands and the
run-directory layout. Checkpoints are recognised by their ``checkpoint.json``
metadata rather than by directory names, so runs can be moved or renamed
freely. The rest of the package works with :class:`CheckpointInfo` records.
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from marlcomm.agents import (
    CHECKPOINT_NAME,
    AgentParams,
    env_config_from_dict,
    load_team,
)
from marlcomm.envs.core import EnvConfig, resolve_env_id

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class CheckpointInfo:
    """A discovered checkpoint directory with its parsed metadata."""

    path: Path
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def method(self) -> str:
        return str(self.metadata["method"])

    @property
    def env_id(self) -> str:
        return str(self.metadata["env"]["env_id"])

    @property
    def seed(self) -> int:
        return int(self.metadata.get("seed", 0))

    @property
    def env_steps(self) -> int:
        return int(self.metadata.get("env_steps", 0))

    @property
    def run_dir(self) -> Path:
        """Training run the checkpoint belongs to (``<run>/checkpoints/step-*``)."""
        if self.path.parent.name == "checkpoints":
            return self.path.parent.parent
        return self.path

    def env_config(self) -> EnvConfig:
        return env_config_from_dict(self.metadata["env"])

    def load(self) -> list[AgentParams]:
        team, _ = load_team(self.path)
        return team


def read_checkpoint_info(path: Path) -> CheckpointInfo:
    """Parse ``<path>/checkpoint.json``.

    Raises
    ------
    FileNotFoundError
        If *path* holds no checkpoint.
    """
    meta_path = path / CHECKPOINT_NAME
    if not meta_path.is_file():
        raise FileNotFoundError(f"No {CHECKPOINT_NAME} in {path}")
    with open(meta_path) as f:
        return CheckpointInfo(path=path, metadata=json.load(f))


def discover_checkpoints(
    root: Path,
    env: str | None = None,
    method: str | list[str] | None = None,
    latest_only: bool = True,
) -> list[CheckpointInfo]:
    """Find checkpoints anywhere under *root*.

    Parameters
    ----------
    root : Path
        Directory to search recursively.
    env : str, optional
        Keep only checkpoints of this environment (aliases accepted).
    method : str or list[str], optional
        Keep only checkpoints of these methods.
    latest_only : bool
        Keep only the checkpoint with the most environment steps per run.

    Returns
    -------
    list[CheckpointInfo]
        Sorted by (method, seed, env_steps) for reproducibility.
    """
    env_id = resolve_env_id(env) if env is not None else None
    methods = [method] if isinstance(method, str) else method

    found: list[CheckpointInfo] = []
    for meta_path in sorted(root.rglob(CHECKPOINT_NAME)):
        try:
            info = read_checkpoint_info(meta_path.parent)
        except (OSError, json.JSONDecodeError) as exc:
            logger.warning("Could not read %s: %s — skipping", meta_path, exc)
            continue
        if env_id is not None and info.env_id != env_id:
            continue
        if methods and info.method not in methods:
            continue
        found.append(info)

    if latest_only:
        latest: dict[Path, CheckpointInfo] = {}
        for info in found:
            current = latest.get(info.run_dir)
            if current is None or info.env_steps > current.env_steps:
                latest[info.run_dir] = info
        found = list(latest.values())

    found.sort(key=lambda c: (c.method, c.seed, c.env_steps, str(c.path)))
    logger.debug(
        "discover_checkpoints: found %d checkpoint(s) under %s", len(found), root
    )
    return found


def resolve_checkpoint(path: Path) -> CheckpointInfo:
    """Accept a checkpoint directory or a run directory (latest checkpoint).

    Raises
    ------
    FileNotFoundError
        If no checkpoint exists at or below *path*.
    """
    if (path / CHECKPOINT_NAME).is_file():
        return read_checkpoint_info(path)
    if not path.is_dir():
        raise FileNotFoundError(f"Checkpoint path does not exist: {path}")
    candidates = discover_checkpoints(path)
    if not candidates:
        raise FileNotFoundError(f"No checkpoint found under {path}")
    if len({c.run_dir for c in candidates}) > 1:
        raise FileNotFoundError(
            f"{path} holds checkpoints of {len(candidates)} runs; "
            "pass one run directory"
        )
    return candidates[0]


def group_by_method(
    checkpoints: Sequence[CheckpointInfo],
) -> dict[str, list[CheckpointInfo]]:
    """Group checkpoints by method, keeping discovery order within a group."""
    grouped: dict[str, list[CheckpointInfo]] = defaultdict(list)
    for info in checkpoints:
        grouped[info.method].append(info)
    return dict(grouped)


def check_compatible(info: CheckpointInfo, env: str | None, method: str | None) -> None:
    """Raise ``ValueError`` if *info* does not match the requested env/method."""
    if env is not None and info.env_id != resolve_env_id(env):
        raise ValueError(
            f"checkpoint {info.path} was trained on {info.env_id}, "
            f"not {resolve_env_id(env)}"
        )
    if method is not None and info.method != method:
        raise ValueError(
            f"checkpoint {info.path} was trained with {info.method}, not {method}"
        )
