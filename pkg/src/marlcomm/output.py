"""Output writing: JSON documents with provenance and append-only file naming.

Handles:
- The ``generated_by`` provenance block carried by every JSON document
- Versioned output paths, so re-running an evaluation never overwrites an
  earlier result (``eval.json``, ``eval.v2.json``, ``eval.v3.json``, ...)
- Writing JSON documents and CSV tables under those paths

Layout of a training run directory::

    <out>/
        manifest.json                      resolved config, hash, timestamps
        metrics.csv                        training metrics stream
        eval.csv                           periodic greedy evaluation
        checkpoints/step-<env_steps>/      agent-<i>/ + checkpoint.json

Evaluation commands write next to the checkpoint they read (or under
``--out``)::

    eval.json  probe-<task>-<layers>layer.json  goal-similarity.json
    messages.csv  trajectories.jsonl  crossplay.csv  crossplay-pairings.csv
"""

from __future__ import annotations

import json
import logging
from collections.abc import Mapping
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import pandas as pd

import marlcomm

logger = logging.getLogger(__name__)


def generated_by() -> dict[str, str]:
    return {
        "name": "marlcomm",
        "version": marlcomm.__version__,
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }


def versioned_path(path: Path) -> Path:
    """Return *path* if free, else the first free ``<stem>.v<k><suffix>``, k >= 2.

    ``trajectories.jsonl`` becomes ``trajectories.v2.jsonl``.
    """
    if not path.exists():
        return path
    k = 2
    while True:
        candidate = path.with_name(f"{path.stem}.v{k}{path.suffix}")
        if not candidate.exists():
            return candidate
        k += 1


def write_json(payload: Mapping[str, Any], path: Path, versioned: bool = True) -> Path:
    """Write *payload* plus a ``generated_by`` block; returns the path written.

    With *versioned* an existing file is kept and the next free version is
    used instead.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    out_path = versioned_path(path) if versioned else path
    document = {**payload, "generated_by": generated_by()}
    with open(out_path, "w") as f:
        json.dump(document, f, indent=2, default=_json_default)
    logger.info("Wrote %s", out_path)
    return out_path


def write_table(df: pd.DataFrame, path: Path) -> Path:
    """Write *df* as CSV under the next free version of *path*."""
    path.parent.mkdir(parents=True, exist_ok=True)
    out_path = versioned_path(path)
    df.to_csv(out_path, index=False, float_format="%.10g")
    logger.info("Wrote table (%d rows): %s", len(df), out_path)
    return out_path


def _json_default(value: Any) -> Any:
    # numpy scalars and arrays
    if hasattr(value, "tolist"):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")
