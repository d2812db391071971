"""Aggregate per-run evaluation curves into group-level tables.

This module discovers the ``eval.csv`` of every training run below a
directory, takes each run's final evaluation row, and summarises them as
mean ± sd across seeds for every (env, method) pair.

Output layout (written by the ``aggregate`` CLI command)::

    <out_dir>/
        final_eval.tsv     one row per run: env, method, seed, metrics
        summary.tsv        one row per (env, method):
                           n_seeds, <metric>_mean, <metric>_sd
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import pandas as pd

from marlcomm.config import ExperimentConfig, config_from_dict
from marlcomm.discover import MANIFEST_NAME
from marlcomm.training import EVAL_NAME

logger = logging.getLogger(__name__)

ID_COLUMNS = ("env", "method", "seed")
BOOKKEEPING_COLUMNS = ("iteration", "env_steps")


@dataclass(frozen=True)
class RunRecord:
    """A finished (or running) training run found on disk."""

    run_dir: Path
    config: ExperimentConfig

    @property
    def eval_path(self) -> Path:
        return self.run_dir / EVAL_NAME


# ---------------------------------------------------------------------------
# Discovery
# ---------------------------------------------------------------------------


def discover_runs(
    runs_dir: Path,
    env: str | None = None,
    method: list[str] | None = None,
) -> list[RunRecord]:
    """Find run directories (those holding ``manifest.json``) under *runs_dir*.

    Runs without an ``eval.csv`` are skipped with a warning.
    """
    result: list[RunRecord] = []
    for manifest_path in sorted(runs_dir.rglob(MANIFEST_NAME)):
        try:
            with open(manifest_path) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            logger.warning("Could not read %s: %s — skipping", manifest_path, exc)
            continue
        if "config" not in data:
            # parameter manifests inside checkpoints
            continue
        try:
            config = config_from_dict(data["config"])
        except (ValueError, TypeError) as exc:
            logger.warning("Invalid config in %s: %s — skipping", manifest_path, exc)
            continue
        if env is not None and config.env != env:
            continue
        if method and config.method not in method:
            continue
        record = RunRecord(run_dir=manifest_path.parent, config=config)
        if not record.eval_path.is_file():
            logger.warning("No %s in %s — skipping", EVAL_NAME, record.run_dir)
            continue
        result.append(record)
    logger.debug("discover_runs: found %d run(s)", len(result))
    return result


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def final_eval_rows(runs: list[RunRecord]) -> pd.DataFrame:
    """Last evaluation row of each run, prefixed with env, method and seed."""
    frames: list[pd.DataFrame] = []
    for run in runs:
        try:
            df = pd.read_csv(run.eval_path)
        except Exception as exc:
            logger.warning("Could not read %s: %s — skipping", run.eval_path, exc)
            continue
        if df.empty:
            logger.warning("%s has no rows — skipping", run.eval_path)
            continue
        last = df.tail(1).reset_index(drop=True)
        last.insert(0, "env", run.config.env)
        last.insert(1, "method", run.config.method)
        last.insert(2, "seed", run.config.seed)
        frames.append(last)
    if not frames:
        return pd.DataFrame(columns=list(ID_COLUMNS))
    return pd.concat(frames, ignore_index=True)


def summarize(final_rows: pd.DataFrame) -> pd.DataFrame:
    """Mean and population sd of every metric per (env, method) across seeds."""
    metrics = [
        c
        for c in final_rows.columns
        if c not in ID_COLUMNS and c not in BOOKKEEPING_COLUMNS
    ]
    grouped = final_rows.groupby(["env", "method"], sort=True)
    summary = grouped[metrics].agg(["mean", lambda s: s.std(ddof=0)])
    summary.columns = [
        f"{metric}_{'mean' if stat == 'mean' else 'sd'}"
        for metric, stat in summary.columns
    ]
    summary.insert(0, "n_seeds", grouped.size())
    return summary.reset_index()


# ---------------------------------------------------------------------------
# Output writing
# ---------------------------------------------------------------------------


def write_aggregate_tsv(df: pd.DataFrame, output_path: Path) -> Path:
    """Write a DataFrame to a tab-separated file, creating parent directories."""
    output_path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(output_path, sep="\t", index=False, float_format="%.6f")
    return output_path
