"""Command-line interface for marlcomm.

Commands:
    train       Train one team of agents with a communication method.
    eval        Greedy evaluation of a checkpoint (capture breakdown, symmetry).
    probe       Goal visibility / location probes on Find-Goal messages.
    similarity  Goal-distance message similarity on Find-Goal.
    crossplay   Zero-shot cross-play between independently trained teams.
    dump        Export messages (CSV) and trajectories (JSON lines).
    aggregate   Collect final evaluations of many runs into mean ± sd tables.

Examples (train):
    # Contrastive communication on Predator-Prey, published budget
    marlcomm train --env pp --method cacl --seed 0 --out runs/pp-cacl-0

    # Desk-scale Find-Goal run with a custom window and loss weight
    marlcomm train --env fg --method cacl --preset desk --window 3 --kappa 1.0 \\
        --out runs/fg-cacl-0

    # Re-run exactly what a previous manifest describes
    marlcomm train --from-manifest runs/fg-cacl-0/manifest.json --out runs/rerun

Examples (evaluation):
    marlcomm eval runs/pp-cacl-0
    marlcomm probe runs/fg-cacl-0 --task location --layers 2
    marlcomm crossplay runs/ --env fg --methods cacl,aecomm --seeds 3 --n-procs 4
    marlcomm dump runs/fg-cacl-0 --episodes 10 --trajectories
    marlcomm aggregate runs/ -o runs/group
"""

from __future__ import annotations

import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import click
import pandas as pd

from marlcomm.agents import METHODS, AgentParams
from marlcomm.aggregate import (
    discover_runs,
    final_eval_rows,
    summarize,
    write_aggregate_tsv,
)
from marlcomm.comm_losses import CONTRASTIVE_MODES
from marlcomm.config import (
    PRESETS,
    ConfigError,
    ExperimentConfig,
    build_config,
    config_from_dict,
)
from marlcomm.discover import (
    MANIFEST_NAME,
    CheckpointInfo,
    check_compatible,
    discover_checkpoints,
    group_by_method,
    resolve_checkpoint,
)
from marlcomm.envs.core import ENV_ALIASES, ENV_IDS, PREDATOR_PREY, EnvConfig
from marlcomm.evaluation import (
    PROBE_TASKS,
    CrossplayPairing,
    build_probe_dataset,
    collect_probe_samples,
    crossplay_cell,
    crossplay_cells,
    dump_messages,
    dump_trajectories,
    evaluate_team,
    goal_distance_similarity,
    protocol_symmetry,
    train_probe,
)
from marlcomm.output import versioned_path, write_json, write_table
from marlcomm.training import NonFiniteLossError, train

logger = logging.getLogger("marlcomm")

ENV_CHOICES = [*ENV_ALIASES, *ENV_IDS]


def _setup_logging(verbosity: int) -> None:
    """Configure logging based on verbosity level.

    0 (default) → INFO: progress messages visible without any flags
    -v          → INFO with module-level logger names shown
    -vv         → DEBUG: full detail
    """
    level = logging.DEBUG if verbosity >= 2 else logging.INFO
    fmt = (
        "%(asctime)s [%(levelname)-7s] %(name)s | %(message)s"
        if verbosity >= 1
        else "%(asctime)s [%(levelname)-7s] %(message)s"
    )
    logging.basicConfig(level=level, format=fmt, datefmt="%H:%M:%S")
    if verbosity < 2:
        for noisy in ("matplotlib", "PIL", "numexpr"):
            logging.getLogger(noisy).setLevel(logging.WARNING)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class RunManifest:
    """What a training run was asked to do; enough to reproduce it."""

    config: ExperimentConfig
    output_dir: Path
    started: str
    finished: str | None = None

    @property
    def config_hash(self) -> str:
        return self.config.content_hash()

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config.to_dict(),
            "config_hash": self.config_hash,
            "output_dir": str(self.output_dir.resolve()),
            "started": self.started,
            "finished": self.finished,
        }

    def write(self) -> Path:
        return write_json(
            self.to_dict(), self.output_dir / MANIFEST_NAME, versioned=False
        )


def read_manifest(path: Path) -> ExperimentConfig:
    with open(path) as f:
        data = json.load(f)
    config = config_from_dict(data["config"])
    if data.get("config_hash") and data["config_hash"] != config.content_hash():
        raise ConfigError(
            f"{path}: config hash {data['config_hash'][:12]} does not match "
            f"its config ({config.content_hash()[:12]})"
        )
    return config


def _prefix(info: CheckpointInfo) -> str:
    return f"env-{info.env_id}/method-{info.method}/seed-{info.seed}"


def _open_checkpoint(
    path: Path, env: str | None = None, method: str | None = None
) -> tuple[CheckpointInfo, list[AgentParams], EnvConfig]:
    """Resolve and load a checkpoint, exiting with status 2 when unusable."""
    try:
        info = resolve_checkpoint(path)
        check_compatible(info, env, method)
        team = info.load()
    except (FileNotFoundError, ValueError, KeyError) as e:
        logger.error("Cannot use checkpoint %s: %s", path, e)
        sys.exit(2)
    logger.info(
        "%s | Loaded checkpoint at %d env steps: %s",
        _prefix(info),
        info.env_steps,
        info.path,
    )
    return info, team, info.env_config()


def _checkpoint_fields(info: CheckpointInfo) -> dict[str, Any]:
    return {
        "checkpoint": str(info.path.resolve()),
        "env": info.env_id,
        "method": info.method,
        "seed": info.seed,
        "env_steps": info.env_steps,
    }


@click.group()
def main() -> None:
    """marlcomm — decentralised multi-agent RL with learned communication.

    Use ``marlcomm train`` to train a team, then the evaluation commands on
    the checkpoints it writes.
    """


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


@main.command("train")
@click.option(
    "--env",
    "-e",
    type=click.Choice(ENV_CHOICES),
    default=None,
    help="Environment: pp, fg or tj (full names accepted).",
)
@click.option(
    "--method",
    "-m",
    type=click.Choice(list(METHODS)),
    default=None,
    help="Communication method.",
)
@click.option("--seed", "-s", type=int, default=None, help="Run seed (default 0).")
@click.option(
    "--steps",
    type=int,
    default=None,
    help="Environment-step budget (default: the published budget of the env).",
)
@click.option(
    "--out",
    "-o",
    "out_dir",
    type=click.Path(path_type=Path),  # type: ignore[type-var]
    required=True,
    help="Run directory; must not already hold a manifest.",
)
@click.option(
    "--config",
    "config_file",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),  # type: ignore[type-var]
    default=None,
    help="key = value config file.",
)
@click.option(
    "--preset",
    type=click.Choice(sorted(PRESETS)),
    default=None,
    help="Budget preset (desk shrinks budgets for single-machine runs).",
)
@click.option("--kappa", type=float, default=None, help="Contrastive loss weight.")
@click.option("--window", type=int, default=None, help="Positive window (odd).")
@click.option(
    "--contrastive",
    type=click.Choice(list(CONTRASTIVE_MODES)),
    default=None,
    help="Positive selection: all positives (supcon) or one (simclr).",
)
@click.option("--temperature", type=float, default=None, help="Contrastive η.")
@click.option("--n-envs", type=int, default=None, help="Parallel env instances.")
@click.option(
    "--from-manifest",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),  # type: ignore[type-var]
    default=None,
    help="Reproduce the configuration recorded in a previous manifest.json.",
)
@click.option(
    "-v", "--verbose", count=True, help="Increase verbosity (-v names, -vv debug)."
)
def train_cmd(
    env: str | None,
    method: str | None,
    seed: int | None,
    steps: int | None,
    out_dir: Path,
    config_file: Path | None,
    preset: str | None,
    kappa: float | None,
    window: int | None,
    contrastive: str | None,
    temperature: float | None,
    n_envs: int | None,
    from_manifest: Path | None,
    verbose: int,
) -> None:
    """Train one team and write metrics, evaluations and checkpoints."""
    _setup_logging(verbose)

    overrides = {
        "seed": seed,
        "total_steps": steps,
        "kappa": kappa,
        "window": window,
        "contrastive": contrastive,
        "temperature": temperature,
        "n_envs": n_envs,
    }
    try:
        if from_manifest is not None:
            config = read_manifest(from_manifest)
            if any(v is not None for v in (env, method, preset, config_file)):
                raise ConfigError(
                    "--from-manifest cannot be combined with --env, --method, "
                    "--preset or --config"
                )
            changed = {k: v for k, v in overrides.items() if v is not None}
            if changed:
                config = config_from_dict({**config.to_dict(), **changed})
        else:
            if env is None or method is None:
                raise ConfigError("--env and --method are required")
            config = build_config(env, method, preset, config_file, overrides)
    except (ConfigError, OSError, KeyError, json.JSONDecodeError) as e:
        logger.error("Invalid configuration: %s", e)
        sys.exit(2)

    if (out_dir / MANIFEST_NAME).exists():
        logger.error(
            "%s already holds a run (%s); choose a new --out directory.",
            out_dir,
            MANIFEST_NAME,
        )
        sys.exit(2)

    logger.info("marlcomm train starting up")
    logger.info("  Environment:       %s", config.env)
    logger.info("  Method:            %s", config.method)
    logger.info("  Seed:              %d", config.seed)
    logger.info("  Env steps:         %d", config.total_steps)
    logger.info("  Output directory:  %s", out_dir)
    logger.info("  Config hash:       %s", config.content_hash()[:12])

    manifest = RunManifest(config=config, output_dir=out_dir, started=_now())
    manifest.write()

    try:
        result = train(config, out_dir)
    except NonFiniteLossError as e:
        logger.error("Training aborted: %s", e)
        sys.exit(3)

    manifest.finished = _now()
    manifest.write()
    click.echo(
        f"\nmarlcomm train complete: {result.iterations} iteration(s),"
        f" {result.env_steps} env steps, {len(result.checkpoints)} checkpoint(s)"
        f" in {out_dir}."
    )
    sys.exit(0)


# ---------------------------------------------------------------------------
# eval / probe / similarity / dump
# ---------------------------------------------------------------------------

_checkpoint_arg = click.argument(
    "checkpoint",
    type=click.Path(exists=True, file_okay=False, path_type=Path),  # type: ignore[type-var]
)
_out_option = click.option(
    "--out",
    "-o",
    "out_dir",
    type=click.Path(file_okay=False, path_type=Path),  # type: ignore[type-var]
    default=None,
    help="Where to write results (default: the checkpoint directory).",
)
_verbose_option = click.option(
    "-v", "--verbose", count=True, help="Increase verbosity (-v names, -vv debug)."
)


@main.command("eval")
@_checkpoint_arg
@click.option("--episodes", type=int, default=12, show_default=True)
@click.option(
    "--symmetry-episodes",
    type=int,
    default=10,
    show_default=True,
    help="Episodes for protocol symmetry (communicating methods only).",
)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--env", type=click.Choice(ENV_CHOICES), default=None)
@click.option("--method", type=click.Choice(list(METHODS)), default=None)
@_out_option
@_verbose_option
def eval_cmd(
    checkpoint: Path,
    episodes: int,
    symmetry_episodes: int,
    seed: int,
    env: str | None,
    method: str | None,
    out_dir: Path | None,
    verbose: int,
) -> None:
    """Greedy evaluation of CHECKPOINT (a checkpoint or run directory)."""
    _setup_logging(verbose)
    info, team, env_config = _open_checkpoint(checkpoint, env, method)
    prefix = _prefix(info)

    summary = evaluate_team(team, env_config, episodes=episodes, seed=seed)
    payload: dict[str, Any] = {
        **_checkpoint_fields(info),
        "episodes": episodes,
        "eval_seed": seed,
        **summary.as_row(),
    }
    if team[0].spec.communicates:
        payload["protocol_symmetry"] = protocol_symmetry(
            team, env_config, episodes=symmetry_episodes, seed=seed
        )
        logger.info("%s | protocol symmetry %.4f", prefix, payload["protocol_symmetry"])

    path = write_json(payload, (out_dir or info.path) / "eval.json")
    click.echo(
        f"\n{prefix}: reward {summary.mean_ep_reward:.3f},"
        f" length {summary.mean_ep_len:.1f}, success {summary.success_rate:.1%}"
    )
    if env_config.env_id == PREDATOR_PREY:
        b = summary.breakdown
        click.echo(
            f"  captures: none {b['no_prey']:.2f}%, one {b['one_prey']:.2f}%,"
            f" both {b['two_prey']:.2f}%"
        )
    click.echo(f"  written to {path}")
    sys.exit(0)


@main.command("probe")
@_checkpoint_arg
@click.option(
    "--task",
    type=click.Choice(list(PROBE_TASKS)),
    default="location",
    show_default=True,
)
@click.option("--layers", type=click.IntRange(1, 2), default=2, show_default=True)
@click.option("--episodes", type=int, default=30, show_default=True)
@click.option("--epochs", type=int, default=200, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@_out_option
@_verbose_option
def probe_cmd(
    checkpoint: Path,
    task: str,
    layers: int,
    episodes: int,
    epochs: int,
    seed: int,
    out_dir: Path | None,
    verbose: int,
) -> None:
    """Train a probe on messages of a Find-Goal CHECKPOINT."""
    _setup_logging(verbose)
    info, team, env_config = _open_checkpoint(checkpoint)
    prefix = _prefix(info)
    try:
        samples = collect_probe_samples(team, env_config, episodes=episodes, seed=seed)
        dataset = build_probe_dataset(samples, task, seed=seed)
    except ValueError as e:
        logger.error("%s | Cannot build %s probe: %s", prefix, task, e)
        sys.exit(2)
    logger.info(
        "%s | %s probe: %d messages, %d per class",
        prefix,
        task,
        len(samples),
        dataset.n_per_class,
    )
    result = train_probe(dataset, depth=layers, seed=seed, epochs=epochs)
    payload = {
        **_checkpoint_fields(info),
        "task": task,
        "layers": layers,
        "episodes": episodes,
        "classes": list(dataset.classes),
        "n_per_class": result.n_per_class,
        "n_train": result.n_train,
        "n_test": result.n_test,
        "accuracy": result.accuracy,
    }
    name = f"probe-{task}-{layers}layer.json"
    path = write_json(payload, (out_dir or info.path) / name)
    click.echo(
        f"\n{prefix}: {task} probe accuracy {result.accuracy:.4f}"
        f" ({layers}-layer, train {result.n_train}, test {result.n_test},"
        f" {result.n_per_class} per class)"
    )
    click.echo(f"  written to {path}")
    sys.exit(0)


@main.command("similarity")
@_checkpoint_arg
@click.option("--episodes", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@_out_option
@_verbose_option
def similarity_cmd(
    checkpoint: Path, episodes: int, seed: int, out_dir: Path | None, verbose: int
) -> None:
    """Goal-distance message similarity of a Find-Goal CHECKPOINT."""
    _setup_logging(verbose)
    info, team, env_config = _open_checkpoint(checkpoint)
    if not team[0].spec.communicates:
        logger.error("%s | IAC agents emit no messages", _prefix(info))
        sys.exit(2)
    try:
        scores = goal_distance_similarity(
            team, env_config, episodes=episodes, seed=seed
        )
    except ValueError as e:
        logger.error("%s | %s", _prefix(info), e)
        sys.exit(2)
    payload = {
        **_checkpoint_fields(info),
        "episodes": episodes,
        "reference": [1, 1],
        "similarity": {f"{r},{c}": v for (r, c), v in scores.items()},
    }
    path = write_json(payload, (out_dir or info.path) / "goal-similarity.json")
    click.echo(f"\n{_prefix(info)}: similarity to goal (1,1)")
    for (r, c), v in scores.items():
        click.echo(f"  ({r},{c}): {'missing' if v is None else f'{v:.4f}'}")
    click.echo(f"  written to {path}")
    sys.exit(0)


@main.command("dump")
@_checkpoint_arg
@click.option("--episodes", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option(
    "--trajectories",
    is_flag=True,
    default=False,
    help="Also write full trajectories as JSON lines.",
)
@_out_option
@_verbose_option
def dump_cmd(
    checkpoint: Path,
    episodes: int,
    seed: int,
    trajectories: bool,
    out_dir: Path | None,
    verbose: int,
) -> None:
    """Export the messages of CHECKPOINT for external clustering."""
    _setup_logging(verbose)
    info, team, env_config = _open_checkpoint(checkpoint)
    if not team[0].spec.communicates:
        logger.error("%s | IAC agents emit no messages", _prefix(info))
        sys.exit(2)
    target = out_dir or info.path
    messages_path = versioned_path(target / "messages.csv")
    frame = dump_messages(team, env_config, episodes, seed, messages_path)
    click.echo(f"\n{_prefix(info)}: {len(frame)} message rows → {messages_path}")
    if trajectories:
        traj_path = versioned_path(target / "trajectories.jsonl")
        n = dump_trajectories(team, env_config, episodes, seed, traj_path)
        click.echo(f"  {n} trajectory records → {traj_path}")
    sys.exit(0)


# ---------------------------------------------------------------------------
# crossplay
# ---------------------------------------------------------------------------


def _crossplay_worker(
    method_a: str,
    paths_a: list[Path],
    method_b: str,
    paths_b: list[Path],
    env_config: EnvConfig,
    cell_seed: tuple[int, ...],
    pairings: int,
    episodes: int,
    verbosity: int,
) -> tuple[dict[str, Any], list[CrossplayPairing]]:
    """Evaluate one cross-play cell.

    This is a top-level function so it can be pickled by ProcessPoolExecutor;
    teams are loaded inside the worker.
    """
    _setup_logging(verbosity)
    teams_a = [resolve_checkpoint(p).load() for p in paths_a]
    teams_b = teams_a if paths_b == paths_a else [
        resolve_checkpoint(p).load() for p in paths_b
    ]
    return crossplay_cell(
        method_a,
        teams_a,
        method_b,
        teams_b,
        env_config,
        cell_seed=cell_seed,
        pairings=pairings,
        episodes=episodes,
    )


@main.command("crossplay")
@click.argument(
    "runs_dir",
    type=click.Path(exists=True, file_okay=False, path_type=Path),  # type: ignore[type-var]
)
@click.option("--env", type=click.Choice(ENV_CHOICES), required=True)
@click.option(
    "--methods",
    type=str,
    required=True,
    help="Comma-separated methods to pair, e.g. cacl,aecomm.",
)
@click.option(
    "--seeds",
    type=int,
    default=None,
    help="Trained teams (seeds) per method to draw from (default: all found).",
)
@click.option("--pairings", type=int, default=10, show_default=True)
@click.option("--episodes", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option(
    "--n-procs",
    "-n",
    type=int,
    default=1,
    show_default=True,
    help="Parallel worker processes, one cell each. Use -1 for all CPUs.",
)
@click.option(
    "--out",
    "-o",
    "out_dir",
    type=click.Path(file_okay=False, path_type=Path),  # type: ignore[type-var]
    default=None,
    help="Where to write crossplay.csv (default: RUNS_DIR).",
)
@_verbose_option
def crossplay_cmd(
    runs_dir: Path,
    env: str,
    methods: str,
    seeds: int | None,
    pairings: int,
    episodes: int,
    seed: int,
    n_procs: int,
    out_dir: Path | None,
    verbose: int,
) -> None:
    """Zero-shot cross-play between teams found under RUNS_DIR."""
    _setup_logging(verbose)

    method_list = [m.strip() for m in methods.split(",") if m.strip()]
    unknown = [m for m in method_list if m not in METHODS]
    if not method_list or unknown:
        logger.error("--methods must name methods from %s, got %r", METHODS, methods)
        sys.exit(2)
    n_workers = (os.cpu_count() or 1) if n_procs == -1 else n_procs
    if n_workers < 1:
        logger.error("--n-procs must be >= 1 or -1 (all CPUs), got %d", n_procs)
        sys.exit(2)

    found_all = discover_checkpoints(runs_dir, env=env, method=method_list)
    grouped = group_by_method(found_all)
    selected: dict[str, list[CheckpointInfo]] = {}
    for m in method_list:
        found = sorted(grouped.get(m, []), key=lambda c: c.seed)
        if seeds is not None:
            found = found[:seeds]
        if len(found) < 2:
            logger.error(
                "Cross-play needs >= 2 independently trained %s teams on %s;"
                " %d available%s.",
                m,
                env,
                len(found),
                f" with --seeds {seeds}" if seeds is not None else "",
            )
            sys.exit(2)
        selected[m] = found

    env_configs = {c.env_config() for group in selected.values() for c in group}
    if len(env_configs) != 1:
        logger.error(
            "Teams were trained on %d different %s settings", len(env_configs), env
        )
        sys.exit(2)
    env_config = env_configs.pop()

    logger.info("marlcomm crossplay starting")
    logger.info("  Environment:       %s", env_config.env_id)
    for m, group in selected.items():
        logger.info("  %-18s %s", m + ":", ", ".join(f"seed-{c.seed}" for c in group))
    logger.info("  Pairings x episodes per cell: %d x %d", pairings, episodes)

    cells = crossplay_cells(method_list)
    jobs = [
        dict(
            method_a=method_list[a],
            paths_a=[c.path for c in selected[method_list[a]]],
            method_b=method_list[b],
            paths_b=[c.path for c in selected[method_list[b]]],
            env_config=env_config,
            cell_seed=(seed, a, b),
            pairings=pairings,
            episodes=episodes,
            verbosity=verbose,
        )
        for a, b in cells
    ]

    results: dict[int, tuple[dict[str, Any], list[CrossplayPairing]]] = {}
    if n_workers == 1:
        for idx, job in enumerate(jobs):
            results[idx] = _crossplay_worker(**job)
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as executor:
            future_to_idx = {
                executor.submit(_crossplay_worker, **job): idx
                for idx, job in enumerate(jobs)
            }
            for future in as_completed(future_to_idx):
                idx = future_to_idx[future]
                try:
                    results[idx] = future.result()
                except Exception as e:
                    logger.error(
                        "%s x %s | Worker crashed: %s",
                        jobs[idx]["method_a"],
                        jobs[idx]["method_b"],
                        e,
                    )
                    sys.exit(1)

    ordered = [results[idx] for idx in range(len(jobs))]
    table = pd.DataFrame([row for row, _ in ordered])
    table.insert(0, "env", env_config.env_id)
    pairs = pd.DataFrame(
        [
            {
                "method_a": p.method_a,
                "method_b": p.method_b,
                "seed_a": selected[p.method_a][p.team_a].seed,
                "seed_b": selected[p.method_b][p.team_b].seed,
                "pairing_seed": p.seed,
                "slots_a": ";".join(",".join(map(str, s)) for s in p.compositions),
                "score": p.score,
            }
            for _, played in ordered
            for p in played
        ]
    )
    target = out_dir or runs_dir
    table_path = write_table(table, target / "crossplay.csv")
    write_table(pairs, target / "crossplay-pairings.csv")
    write_json(
        {
            "env": env_config.env_id,
            "methods": method_list,
            "checkpoints": {
                m: [str(c.path.resolve()) for c in group]
                for m, group in selected.items()
            },
            "pairings": pairings,
            "episodes": episodes,
            "seed": seed,
            "table": table_path.name,
        },
        target / "crossplay.json",
    )

    click.echo(f"\nmarlcomm crossplay complete ({env_config.env_id}):")
    for row in table.itertuples(index=False):
        click.echo(
            f"  {row.method_a} x {row.method_b}: {row.metric}"
            f" {row.mean:.3f} ± {row.sd:.3f}"
        )
    click.echo(f"  written to {table_path}")
    sys.exit(0)


# ---------------------------------------------------------------------------
# aggregate
# ---------------------------------------------------------------------------


@main.command("aggregate")
@click.argument(
    "runs_dir",
    type=click.Path(exists=True, file_okay=False, path_type=Path),  # type: ignore[type-var]
)
@click.option(
    "--output-dir",
    "-o",
    type=click.Path(path_type=Path),  # type: ignore[type-var]
    default=None,
    help="Directory to write aggregate tables (default: <runs_dir>/group).",
)
@click.option("--env", type=click.Choice(ENV_CHOICES), default=None)
@click.option(
    "--method",
    "-m",
    type=click.Choice(list(METHODS)),
    multiple=True,
    default=None,
    help="Method(s) to aggregate (default: all). Repeatable.",
)
@click.option(
    "--force",
    is_flag=True,
    default=False,
    help="Overwrite existing aggregate files.",
)
@_verbose_option
def aggregate_cmd(
    runs_dir: Path,
    output_dir: Path | None,
    env: str | None,
    method: tuple[str, ...],
    force: bool,
    verbose: int,
) -> None:
    """Summarise the final evaluation of every run under RUNS_DIR.

    Writes ``final_eval.tsv`` (one row per run) and ``summary.tsv``
    (mean ± sd per env and method) to <RUNS_DIR>/group/ by default.
    """
    _setup_logging(verbose)
    effective_output_dir = output_dir if output_dir is not None else runs_dir / "group"
    env_id = ENV_ALIASES.get(env, env) if env is not None else None

    logger.info("marlcomm aggregate starting")
    logger.info("  Input (runs):      %s", runs_dir)
    logger.info("  Output directory:  %s", effective_output_dir)

    runs = discover_runs(runs_dir, env=env_id, method=list(method) or None)
    final_rows = final_eval_rows(runs)
    if final_rows.empty:
        logger.error("No evaluated runs found in %s.", runs_dir)
        sys.exit(2)
    logger.info("Found %d evaluated run(s).", len(final_rows))

    n_written = 0
    for name, df in (("final_eval", final_rows), ("summary", summarize(final_rows))):
        out_path = effective_output_dir / f"{name}.tsv"
        if out_path.exists() and not force:
            logger.info("Skipping %s — already exists", out_path.name)
            continue
        write_aggregate_tsv(df, out_path)
        logger.info("Wrote %s (%d rows): %s", name, len(df), out_path)
        n_written += 1

    click.echo(f"\nmarlcomm aggregate complete: {n_written} file(s) written.")
    sys.exit(0)

