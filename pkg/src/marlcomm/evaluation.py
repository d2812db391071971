"""Protocol-quality measurements over trained teams.

All measurements replay greedy episodes with the team's current parameters.
Episode seeds are derived from the ``seed`` argument, so two calls with the
same team and seed see the same episodes.

Measurements:

- :func:`evaluate_team`            mean episodic reward, length and success
- :func:`capture_breakdown`        Predator-Prey share of episodes with 0/1/2 captures
- :func:`protocol_symmetry`        cosine agreement of agents' messages on the same
                                   observation
- :func:`build_probe_dataset` /
  :func:`train_probe`              goal visibility and goal location probes
- :func:`goal_distance_similarity` message similarity between pinned goal positions
- :func:`crossplay_eval`           zero-shot pairing of independently trained teams
- :func:`dump_messages` /
  :func:`dump_trajectories`        message CSV and JSON-lines trajectory exports
"""

from __future__ import annotations

import json
import logging
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from marlcomm import envs
from marlcomm.agents import (
    MESSAGE_DIM,
    AgentParams,
    produce_message,
    team_act,
)
from marlcomm.envs.core import FIND_GOAL, PREDATOR_PREY, EnvConfig
from marlcomm.envs.find_goal import REGIONS
from marlcomm.numerics import tensor as T
from marlcomm.numerics.layers import init_linear, linear
from marlcomm.numerics.optim import Adam
from marlcomm.numerics.tensor import GradTape, Tensor

logger = logging.getLogger(__name__)

MESSAGE_COLUMNS = tuple(f"m{d + 1}" for d in range(MESSAGE_DIM))
DUMP_COLUMNS = (
    "episode",
    "t",
    "agent",
    *MESSAGE_COLUMNS,
    "goal_visible",
    "other_agent_visible",
    "goal_region",
)
PROBE_TASKS = ("visibility", "location")
GOAL_REFERENCE = (1, 1)
GOAL_ANCHORS = ((5, 5), (9, 9), (13, 13))


# ---------------------------------------------------------------------------
# Episode playback
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeResult:
    reward: float
    length: int
    success: bool
    prey_captured: int = 0


@dataclass(frozen=True)
class StepRecord:
    """One step of a replayed episode, observed before the transition."""

    episode: int
    t: int
    obs: np.ndarray
    actions: np.ndarray
    messages: np.ndarray
    rewards: np.ndarray
    active: np.ndarray
    visibility: tuple[dict[str, Any], ...]
    state: dict[str, Any]


def episode_seeds(seed: int, episodes: int) -> list[int]:
    return [
        int(child.generate_state(1)[0])
        for child in np.random.SeedSequence(seed).spawn(episodes)
    ]


def play_episodes(
    team: Sequence[AgentParams],
    env_config: EnvConfig,
    episodes: int,
    seed: int,
    greedy: bool = True,
    goal: tuple[int, int] | None = None,
    on_step: Callable[[StepRecord], None] | None = None,
) -> list[EpisodeResult]:
    """Run *episodes* full episodes, one at a time.

    *goal* pins the Find-Goal target. *on_step* receives a :class:`StepRecord`
    for every step.
    """
    if len(team) != env_config.n_agents:
        raise ValueError(
            f"team of {len(team)} agents cannot play {env_config.env_id} "
            f"with {env_config.n_agents} agents"
        )
    if team[0].spec.env_id != env_config.env_id:
        raise ValueError(
            f"team was trained on {team[0].spec.env_id}, not {env_config.env_id}"
        )
    kwargs: dict[str, Any] = {} if goal is None else {"goal": goal}
    rng = np.random.default_rng([seed, 1])
    n = env_config.n_agents
    hidden_size = team[0].spec.hidden
    results: list[EpisodeResult] = []
    for episode, env_seed in enumerate(episode_seeds(seed, episodes)):
        state, obs = envs.reset(env_config, env_seed, **kwargs)
        incoming = np.zeros((1, n, MESSAGE_DIM))
        hidden = np.zeros((1, n, hidden_size))
        total = 0.0
        while True:
            active = state.active.copy()
            step = team_act(team, obs[None], incoming, hidden, rng, greedy=greedy)
            record_vis: tuple[dict[str, Any], ...] = ()
            summary: dict[str, Any] = {}
            if on_step is not None:
                record_vis = tuple(envs.visibility(state, i) for i in range(n))
                summary = envs.state_summary(state)
            t = state.step_count
            result = envs.step(state, step.actions[0])
            total += result.info["team_reward"]
            if on_step is not None:
                on_step(
                    StepRecord(
                        episode=episode,
                        t=t,
                        obs=obs,
                        actions=step.actions[0],
                        messages=step.messages[0],
                        rewards=result.rewards,
                        active=active,
                        visibility=record_vis,
                        state=summary,
                    )
                )
            if result.done:
                results.append(
                    EpisodeResult(
                        reward=total,
                        length=state.step_count,
                        success=bool(result.info.get("success", False)),
                        prey_captured=int(result.info.get("prey_captured", 0)),
                    )
                )
                break
            obs = result.observations
            hidden = step.hidden
            incoming = step.messages * active[None, :, None]
    return results


@dataclass(frozen=True)
class EvalSummary:
    env_id: str
    episodes: tuple[EpisodeResult, ...]
    breakdown: dict[str, float] = field(default_factory=dict)

    @property
    def mean_ep_reward(self) -> float:
        return float(np.mean([e.reward for e in self.episodes]))

    @property
    def mean_ep_len(self) -> float:
        return float(np.mean([e.length for e in self.episodes]))

    @property
    def success_rate(self) -> float:
        return float(np.mean([e.success for e in self.episodes]))

    def as_row(self) -> dict[str, float]:
        row = {
            "mean_ep_reward": self.mean_ep_reward,
            "mean_ep_len": self.mean_ep_len,
            "success_rate": self.success_rate,
        }
        row.update(self.breakdown)
        return row


def breakdown_from_results(results: Sequence[EpisodeResult]) -> dict[str, float]:
    """Percent of episodes that captured no, one, or two prey."""
    if not results:
        raise ValueError("capture breakdown needs at least one episode")
    counts = np.bincount(
        [min(r.prey_captured, 2) for r in results], minlength=3
    ).astype(float)
    shares = 100.0 * counts / counts.sum()
    return {"no_prey": shares[0], "one_prey": shares[1], "two_prey": shares[2]}


def evaluate_team(
    team: Sequence[AgentParams],
    env_config: EnvConfig,
    episodes: int = 12,
    seed: int = 0,
) -> EvalSummary:
    """Greedy evaluation over *episodes* episodes."""
    results = play_episodes(team, env_config, episodes, seed)
    breakdown = (
        breakdown_from_results(results) if env_config.env_id == PREDATOR_PREY else {}
    )
    return EvalSummary(env_config.env_id, tuple(results), breakdown)


def capture_breakdown(
    team: Sequence[AgentParams],
    env_config: EnvConfig,
    episodes: int = 10,
    seed: int = 0,
) -> dict[str, float]:
    if env_config.env_id != PREDATOR_PREY:
        raise ValueError(
            f"capture breakdown is defined for predator_prey, got {env_config.env_id}"
        )
    return breakdown_from_results(play_episodes(team, env_config, episodes, seed))


# ---------------------------------------------------------------------------
# Protocol symmetry
# ---------------------------------------------------------------------------


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    return np.sum(a * b, axis=-1) / np.maximum(na * nb, 1e-12)


MessageFn = Callable[[np.ndarray], np.ndarray]


def protocol_symmetry_from_observations(
    message_fns: Sequence[MessageFn],
    observations: np.ndarray,
    active: np.ndarray | None = None,
) -> float:
    """Mean cosine similarity of ``Ψ^i(o_j)`` and ``Ψ^j(o_j)`` over steps and i ≠ j.

    ``observations`` is ``[steps, N, obs_dim]``; each function maps a
    ``[B, obs_dim]`` batch to ``[B, D]`` messages. Pairs whose observing agent
    ``j`` is inactive are skipped.
    """
    n = len(message_fns)
    if n < 2:
        raise ValueError(f"protocol symmetry needs at least 2 agents, got {n}")
    steps = observations.shape[0]
    if active is None:
        mask = np.ones((steps, n), dtype=bool)
    else:
        mask = np.asarray(active, bool)
    total = 0.0
    count = 0
    for j in range(n):
        rows = mask[:, j]
        if not rows.any():
            continue
        obs_j = observations[rows, j]
        own = message_fns[j](obs_j)
        for i in range(n):
            if i == j:
                continue
            total += float(_cosine(message_fns[i](obs_j), own).sum())
            count += int(rows.sum())
    if count == 0:
        raise ValueError("no active observations to compare")
    return total / count


def protocol_symmetry(
    team: Sequence[AgentParams],
    env_config: EnvConfig,
    episodes: int = 10,
    seed: int = 0,
) -> float:
    """Protocol symmetry of *team* on its own greedy trajectories."""
    if not team[0].spec.communicates:
        raise ValueError("protocol symmetry needs communicating agents (not IAC)")
    observations: list[np.ndarray] = []
    active: list[np.ndarray] = []

    def keep(record: StepRecord) -> None:
        observations.append(record.obs)
        active.append(record.active)

    play_episodes(team, env_config, episodes, seed, on_step=keep)
    fns = [lambda o, p=p: produce_message(o, p) for p in team]
    return protocol_symmetry_from_observations(
        fns, np.stack(observations), np.stack(active)
    )


# ---------------------------------------------------------------------------
# Message exports
# ---------------------------------------------------------------------------


def collect_messages(
    team: Sequence[AgentParams],
    env_config: EnvConfig,
    episodes: int,
    seed: int,
    goal: tuple[int, int] | None = None,
) -> pd.DataFrame:
    """One row per (episode, step, agent) with the message and what the agent saw."""
    rows: list[dict[str, Any]] = []

    def keep(record: StepRecord) -> None:
        for i, vis in enumerate(record.visibility):
            row: dict[str, Any] = {"episode": record.episode, "t": record.t, "agent": i}
            row.update(zip(MESSAGE_COLUMNS, record.messages[i].tolist()))
            row.update(vis)
            rows.append(row)

    play_episodes(team, env_config, episodes, seed, goal=goal, on_step=keep)
    return pd.DataFrame(rows, columns=list(DUMP_COLUMNS))


def dump_messages(
    team: Sequence[AgentParams],
    env_config: EnvConfig,
    episodes: int,
    seed: int,
    path: Path,
) -> pd.DataFrame:
    """Write the message CSV used for external clustering and return it."""
    frame = collect_messages(team, env_config, episodes, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
    logger.info("Wrote %d message rows to %s", len(frame), path)
    return frame


def dump_trajectories(
    team: Sequence[AgentParams],
    env_config: EnvConfig,
    episodes: int,
    seed: int,
    path: Path,
) -> int:
    """Write one JSON-lines record per step; returns the number of records."""
    path.parent.mkdir(parents=True, exist_ok=True)
    lines: list[str] = []

    def keep(record: StepRecord) -> None:
        entry = envs.trajectory_record(
            record.episode,
            record.t,
            record.state,
            record.obs,
            record.actions,
            record.rewards,
            record.messages,
        )
        lines.append(json.dumps(entry))

    play_episodes(team, env_config, episodes, seed, on_step=keep)
    path.write_text("\n".join(lines) + "\n" if lines else "")
    return len(lines)


# ---------------------------------------------------------------------------
# Probing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeDataset:
    """Class-balanced message/label split; labels index ``classes``."""

    task: str
    classes: tuple[str, ...]
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def n_per_class(self) -> int:
        return int((len(self.y_train) + len(self.y_test)) // len(self.classes))


def collect_probe_samples(
    team: Sequence[AgentParams],
    env_config: EnvConfig,
    episodes: int = 30,
    seed: int = 0,
) -> pd.DataFrame:
    if env_config.env_id != FIND_GOAL:
        raise ValueError(f"probing needs a find_goal team, got {env_config.env_id}")
    if not team[0].spec.communicates:
        raise ValueError("probing needs communicating agents (not IAC)")
    return collect_messages(team, env_config, episodes, seed)


def build_probe_dataset(
    samples: pd.DataFrame,
    task: str,
    seed: int = 0,
    train_fraction: float = 0.7,
) -> ProbeDataset:
    """Balance *samples* by downsampling and split each class 70/30.

    ``visibility`` labels every message by whether the goal was in view;
    ``location`` keeps goal-visible messages and labels them by goal region.

    Raises
    ------
    ValueError
        For an unknown task or when some class has no samples.
    """
    if task not in PROBE_TASKS:
        raise ValueError(f"task must be one of {PROBE_TASKS}, got {task!r}")
    if task == "visibility":
        classes: tuple[str, ...] = ("hidden", "visible")
        labels = samples["goal_visible"].astype(bool).astype(int).to_numpy()
        keep = np.ones(len(samples), dtype=bool)
    else:
        classes = REGIONS
        keep = samples["goal_visible"].astype(bool).to_numpy()
        lookup = {name: k for k, name in enumerate(classes)}
        labels = np.array([lookup.get(r, -1) for r in samples["goal_region"]])
    x = samples.loc[:, list(MESSAGE_COLUMNS)].to_numpy(dtype=np.float64)[keep]
    y = labels[keep]

    counts = np.bincount(y[y >= 0], minlength=len(classes))
    if counts.min() == 0:
        missing = [classes[k] for k in np.flatnonzero(counts == 0)]
        raise ValueError(f"{task} probe has no samples for class(es) {missing}")
    per_class = int(counts.min())
    n_train = int(round(train_fraction * per_class))
    rng = np.random.default_rng(seed)
    train_idx: list[np.ndarray] = []
    test_idx: list[np.ndarray] = []
    for k in range(len(classes)):
        chosen = rng.permutation(np.flatnonzero(y == k))[:per_class]
        train_idx.append(chosen[:n_train])
        test_idx.append(chosen[n_train:])
    tr = rng.permutation(np.concatenate(train_idx))
    te = np.concatenate(test_idx)
    logger.debug(
        "%s probe: %d per class, %d train / %d test", task, per_class, len(tr), len(te)
    )
    return ProbeDataset(task, classes, x[tr], y[tr], x[te], y[te])


@dataclass(frozen=True)
class ProbeResult:
    task: str
    depth: int
    accuracy: float
    n_train: int
    n_test: int
    n_per_class: int


def _probe_logits(w: Mapping[str, Tensor], x: Tensor, depth: int) -> Tensor:
    if depth == 1:
        return linear(x, w["out.w"], w["out.b"])
    return linear(T.relu(linear(x, w["fc0.w"], w["fc0.b"])), w["out.w"], w["out.b"])


def train_probe(
    dataset: ProbeDataset,
    depth: int = 2,
    seed: int = 0,
    epochs: int = 200,
    lr: float = 1e-3,
    batch_size: int = 32,
    hidden: int = 32,
) -> ProbeResult:
    """Fit a softmax probe with Adam and return its held-out accuracy."""
    if depth not in (1, 2):
        raise ValueError(f"probe depth must be 1 or 2, got {depth}")
    rng = np.random.default_rng(seed)
    n_classes = len(dataset.classes)
    n_in = dataset.x_train.shape[1]
    params: dict[str, np.ndarray] = {}
    if depth == 2:
        params["fc0.w"], params["fc0.b"] = init_linear(rng, hidden, n_in)
        params["out.w"], params["out.b"] = init_linear(rng, n_classes, hidden)
    else:
        params["out.w"], params["out.b"] = init_linear(rng, n_classes, n_in)
    optimizer = Adam(params, lr=lr, eps=1e-8)

    n = len(dataset.y_train)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            tape = GradTape()
            w = tape.watch_all(params)
            logits = _probe_logits(w, Tensor(dataset.x_train[idx]), depth)
            log_probs = T.log_softmax(logits)
            loss = -T.mean(log_probs[np.arange(len(idx)), dataset.y_train[idx]])
            optimizer.step(params, tape.backward(loss))

    consts = {k: Tensor(v) for k, v in params.items()}
    test_logits = _probe_logits(consts, Tensor(dataset.x_test), depth)
    predicted = np.argmax(test_logits.data, axis=1)
    accuracy = (
        float(np.mean(predicted == dataset.y_test)) if len(predicted) else float("nan")
    )
    return ProbeResult(
        task=dataset.task,
        depth=depth,
        accuracy=accuracy,
        n_train=n,
        n_test=len(dataset.y_test),
        n_per_class=dataset.n_per_class,
    )


# ---------------------------------------------------------------------------
# Goal-distance similarity
# ---------------------------------------------------------------------------


def message_set_similarity(a: np.ndarray, b: np.ndarray) -> float | None:
    """Mean cosine similarity over all cross pairs; ``None`` if a set is empty."""
    if len(a) == 0 or len(b) == 0:
        return None
    an = a / np.linalg.norm(a, axis=1, keepdims=True)
    bn = b / np.linalg.norm(b, axis=1, keepdims=True)
    return float(np.mean(an @ bn.T))


def goal_distance_similarity(
    team: Sequence[AgentParams],
    env_config: EnvConfig,
    episodes: int = 10,
    seed: int = 0,
    reference: tuple[int, int] = GOAL_REFERENCE,
    anchors: Sequence[tuple[int, int]] = GOAL_ANCHORS,
) -> dict[tuple[int, int], float | None]:
    """Similarity of goal-visible messages with the goal pinned at *reference*
    versus pinned at each anchor. Anchors outside the grid or with no
    goal-visible message map to ``None``.
    """
    if env_config.env_id != FIND_GOAL:
        raise ValueError(
            f"goal-distance similarity needs find_goal, got {env_config.env_id}"
        )

    def visible_messages(goal: tuple[int, int]) -> np.ndarray:
        if not all(0 <= c < env_config.grid_size for c in goal):
            return np.zeros((0, MESSAGE_DIM))
        frame = collect_messages(team, env_config, episodes, seed, goal=goal)
        return frame.loc[
            frame["goal_visible"].astype(bool), list(MESSAGE_COLUMNS)
        ].to_numpy(float)

    base = visible_messages(reference)
    out: dict[tuple[int, int], float | None] = {}
    for anchor in anchors:
        pinned = visible_messages(tuple(anchor))
        out[tuple(anchor)] = message_set_similarity(base, pinned)
        if out[tuple(anchor)] is None:
            logger.warning(
                "No goal-visible messages for goal %s or %s", reference, anchor
            )
    return out


# ---------------------------------------------------------------------------
# Zero-shot cross-play
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CrossplayPairing:
    """One evaluated pairing; ``team_a``/``team_b`` index the per-method lists."""

    method_a: str
    method_b: str
    team_a: int
    team_b: int
    seed: int
    compositions: tuple[tuple[int, ...], ...]
    score: float


def mixed_team(
    team_a: Sequence[AgentParams],
    team_b: Sequence[AgentParams],
    slots_a: Sequence[int],
) -> list[AgentParams]:
    """Agents of *team_a* in *slots_a*, agents of *team_b* everywhere else."""
    chosen = set(slots_a)
    return [team_a[i] if i in chosen else team_b[i] for i in range(len(team_a))]


def crossplay_metric(env_id: str) -> str:
    return "mean_ep_len" if env_id == FIND_GOAL else "mean_ep_reward"


def crossplay_compositions(
    n_agents: int, rng: np.random.Generator
) -> list[tuple[int, ...]]:
    """Slots taken by the first team in each composition played.

    An even team is split in half. An odd team is played twice, once with
    the first team in the majority and once in the minority.
    """
    sizes = [n_agents // 2] if n_agents % 2 == 0 else [n_agents // 2 + 1, n_agents // 2]
    return [
        tuple(sorted(int(s) for s in rng.choice(n_agents, size=k, replace=False)))
        for k in sizes
    ]


def crossplay_pair(
    team_a: Sequence[AgentParams],
    team_b: Sequence[AgentParams],
    env_config: EnvConfig,
    seed: int,
    episodes: int = 10,
) -> tuple[float, list[tuple[int, ...]]]:
    """Score one pairing of two teams, averaged over its compositions.

    Pairing a team with itself equals :func:`evaluate_team` with the same seed.
    """
    metric = crossplay_metric(env_config.env_id)
    compositions = crossplay_compositions(
        env_config.n_agents, np.random.default_rng([seed, 2])
    )
    scores = [
        evaluate_team(
            mixed_team(team_a, team_b, slots), env_config, episodes, seed
        ).as_row()[metric]
        for slots in compositions
    ]
    return float(np.mean(scores)), compositions


def crossplay_cell(
    method_a: str,
    teams_a: Sequence[Sequence[AgentParams]],
    method_b: str,
    teams_b: Sequence[Sequence[AgentParams]],
    env_config: EnvConfig,
    cell_seed: Sequence[int],
    pairings: int = 10,
    episodes: int = 10,
) -> tuple[dict[str, Any], list[CrossplayPairing]]:
    """Evaluate *pairings* random pairings of one (method_a, method_b) cell.

    Returns the summary row (mean and sd over pairings) and the pairings.
    Intra-method cells always pair two different teams.
    """
    same = method_a == method_b
    if len(teams_a) < 2 or len(teams_b) < 2:
        raise ValueError(
            f"cross-play needs >= 2 independently trained teams per method; "
            f"{method_a}: {len(teams_a)}, {method_b}: {len(teams_b)}"
        )
    metric = crossplay_metric(env_config.env_id)
    played: list[CrossplayPairing] = []
    for k in range(pairings):
        seq = np.random.SeedSequence([*cell_seed, k])
        pair_seed = int(seq.generate_state(1)[0])
        rng = np.random.default_rng(seq)
        if same:
            ia, ib = (int(i) for i in rng.choice(len(teams_a), size=2, replace=False))
        else:
            ia, ib = int(rng.integers(len(teams_a))), int(rng.integers(len(teams_b)))
        score, compositions = crossplay_pair(
            teams_a[ia], teams_b[ib], env_config, pair_seed, episodes
        )
        played.append(
            CrossplayPairing(
                method_a, method_b, ia, ib, pair_seed, tuple(compositions), score
            )
        )
    scores = [p.score for p in played]
    row = {
        "method_a": method_a,
        "method_b": method_b,
        "metric": metric,
        "mean": float(np.mean(scores)),
        "sd": float(np.std(scores)),
        "pairings": pairings,
        "episodes": pairings * episodes,
    }
    logger.info(
        "cross-play %s x %s | %s %.3f ± %.3f over %d pairing(s)",
        method_a,
        method_b,
        metric,
        row["mean"],
        row["sd"],
        pairings,
    )
    return row, played


def crossplay_cells(methods: Sequence[str]) -> list[tuple[int, int]]:
    """Upper-triangular (a, b) index pairs, diagonal included."""
    return [(a, b) for a in range(len(methods)) for b in range(a, len(methods))]


def crossplay_eval(
    teams: Mapping[str, Sequence[Sequence[AgentParams]]],
    env_config: EnvConfig,
    pairings: int = 10,
    episodes: int = 10,
    seed: int = 0,
) -> pd.DataFrame:
    """Cross-play table over every (method_a, method_b) cell.

    *teams* maps a method name to its independently trained teams (one per
    training seed).

    Raises
    ------
    ValueError
        If a method has fewer than 2 teams.
    """
    short = {m: len(ts) for m, ts in teams.items() if len(ts) < 2}
    if short:
        raise ValueError(
            f"cross-play needs >= 2 independently trained teams per method, "
            f"got {short}"
        )
    methods = list(teams)
    rows = [
        crossplay_cell(
            methods[a],
            teams[methods[a]],
            methods[b],
            teams[methods[b]],
            env_config,
            cell_seed=(seed, a, b),
            pairings=pairings,
            episodes=episodes,
        )[0]
        for a, b in crossplay_cells(methods)
    ]
    return pd.DataFrame(rows)
