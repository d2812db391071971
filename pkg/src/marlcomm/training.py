"""Rollout collection, n-step actor-critic losses and the training loop.

One iteration collects ``segment_length`` steps from ``n_envs`` synchronously
batched environment instances, then every agent takes one Adam step on

    policy + value_coef * value - entropy_coef * entropy + grounding term

where the grounding term is ``kappa * CACL``, ``aecomm_coef * AEComm`` or
``pl_coef * PL`` depending on the method. Decentralised methods differentiate
each agent on its own tape with received messages detached; DIAL variants
build a single tape so the receivers' losses reach the senders' message heads.
The grounding losses see the observation encoding through a stop-gradient, so
they update the message head (and decoder) only.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from marlcomm import envs
from marlcomm.agents import (
    AECOMM_METHODS,
    CACL_METHODS,
    HIDDEN,
    MESSAGE_DIM,
    AgentParams,
    AgentSpec,
    deliver,
    encode_messages,
    encode_observation,
    heads,
    init_team,
    message_from_encoding,
    received_for,
    save_team,
    team_act,
    team_values,
)
from marlcomm.comm_losses import (
    MessageBatch,
    MessageRouting,
    aecomm_loss,
    cacl_loss,
    message_routing,
    pl_loss,
    route_received,
)
from marlcomm.config import ExperimentConfig
from marlcomm.envs.core import PREDATOR_PREY, EnvConfig
from marlcomm.evaluation import evaluate_team
from marlcomm.numerics import tensor as T
from marlcomm.numerics.layers import GRUParams, gru_step
from marlcomm.numerics.optim import Adam
from marlcomm.numerics.tensor import GradTape, Tensor

logger = logging.getLogger(__name__)

METRICS_NAME = "metrics.csv"
EVAL_NAME = "eval.csv"
METRICS_COLUMNS = (
    "iteration",
    "env_steps",
    "mean_ep_reward",
    "mean_ep_len",
    "success_rate",
    "loss_policy",
    "loss_value",
    "loss_comm",
    "grad_norm",
)

# Independent streams derived from the run seed.
_STREAM_ROLLOUT = 1
_STREAM_LEARNER = 2
_STREAM_EVAL = 3


class NonFiniteLossError(RuntimeError):
    """A loss or gradient became NaN or infinite during training."""


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeStats:
    instance: int
    reward: float
    length: int
    success: bool
    prey_captured: int = 0


@dataclass
class RolloutBatch:
    """One segment of ``T`` steps over ``E`` instances and ``N`` agents.

    ``incoming[t]`` are the delivered messages agents received at step ``t``
    and ``messages[t]`` the raw messages they emitted. ``starts[t]`` marks the
    first step of an episode, ``dones[t]`` an episode ending after step ``t``.
    ``episode_ids[t, e]`` numbers the episodes of instance ``e``.
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    starts: np.ndarray
    active: np.ndarray
    messages: np.ndarray
    incoming: np.ndarray
    values: np.ndarray
    log_probs: np.ndarray
    hidden0: np.ndarray
    bootstrap_values: np.ndarray
    episode_ids: np.ndarray
    episodes: list[EpisodeStats] = field(default_factory=list)

    @property
    def segment_length(self) -> int:
        return int(self.obs.shape[0])

    @property
    def n_envs(self) -> int:
        return int(self.obs.shape[1])

    @property
    def n_agents(self) -> int:
        return int(self.obs.shape[2])

    @property
    def env_steps(self) -> int:
        return self.segment_length * self.n_envs

    def received(self, agent: int) -> np.ndarray:
        """``[T, E, (N-1)*4]`` message input of *agent*."""
        return received_for(self.incoming, agent)

    def trajectory_ids(self) -> np.ndarray:
        """``[T, E]`` ids unique per (instance, episode)."""
        instance = np.broadcast_to(np.arange(self.n_envs), self.episode_ids.shape)
        return self.episode_ids * self.n_envs + instance


class RolloutCollector:
    """Steps ``n_envs`` environment instances with a team, auto-resetting episodes.

    Instance ``e`` draws its episode seeds from its own stream; action sampling
    uses a separate stream, so a fixed seed gives bit-identical batches.
    """

    def __init__(self, env_config: EnvConfig, n_envs: int, seed: int) -> None:
        if n_envs < 1:
            raise ValueError(f"n_envs must be >= 1, got {n_envs}")
        self.env_config = env_config
        self.n_envs = n_envs
        children = np.random.SeedSequence([seed, _STREAM_ROLLOUT]).spawn(n_envs + 1)
        self.rng = np.random.default_rng(children[0])
        self.states: list[envs.EnvState] = []
        obs: list[np.ndarray] = []
        for child in children[1:]:
            first_seed = int(child.generate_state(1)[0])
            state, o = envs.reset(env_config, first_seed)
            self.states.append(state)
            obs.append(o)
        n = env_config.n_agents
        self.obs = np.stack(obs)
        self.incoming = np.zeros((n_envs, n, MESSAGE_DIM))
        self.hidden = np.zeros((n_envs, n, HIDDEN))
        self.starts = np.ones(n_envs, dtype=bool)
        self.episode_ids = np.zeros(n_envs, dtype=np.int64)
        self.ep_reward = np.zeros(n_envs)
        self.ep_len = np.zeros(n_envs, dtype=np.int64)
        self.env_steps = 0

    def collect(self, team: Sequence[AgentParams], segment_length: int) -> RolloutBatch:
        n_envs, n = self.n_envs, self.env_config.n_agents
        hidden_size = team[0].spec.hidden
        if self.hidden.shape[-1] != hidden_size:
            self.hidden = np.zeros((n_envs, n, hidden_size))
        length = segment_length
        obs = np.zeros((length, n_envs, n, self.env_config.obs_dim))
        actions = np.zeros((length, n_envs, n), dtype=np.int64)
        rewards = np.zeros((length, n_envs, n))
        dones = np.zeros((length, n_envs), dtype=bool)
        starts = np.zeros((length, n_envs), dtype=bool)
        active = np.zeros((length, n_envs, n), dtype=bool)
        messages = np.zeros((length, n_envs, n, 4))
        incoming = np.zeros((length, n_envs, n, 4))
        values = np.zeros((length, n_envs, n))
        log_probs = np.zeros((length, n_envs, n))
        episode_ids = np.zeros((length, n_envs), dtype=np.int64)
        hidden0 = self.hidden.copy()
        episodes: list[EpisodeStats] = []

        for t in range(length):
            obs[t] = self.obs
            incoming[t] = self.incoming
            starts[t] = self.starts
            episode_ids[t] = self.episode_ids
            active[t] = np.stack([s.active for s in self.states])
            step = team_act(team, self.obs, self.incoming, self.hidden, self.rng)
            actions[t] = step.actions
            messages[t] = step.messages
            values[t] = step.values
            log_probs[t] = step.log_probs

            next_hidden = step.hidden.copy()
            next_incoming = deliver(step.messages, active[t])
            for e, state in enumerate(self.states):
                result = envs.step(state, step.actions[e])
                rewards[t, e] = result.rewards
                self.ep_reward[e] += result.info["team_reward"]
                self.ep_len[e] += 1
                self.starts[e] = False
                if result.done:
                    dones[t, e] = True
                    episodes.append(
                        EpisodeStats(
                            instance=e,
                            reward=float(self.ep_reward[e]),
                            length=int(self.ep_len[e]),
                            success=bool(result.info.get("success", False)),
                            prey_captured=int(result.info.get("prey_captured", 0)),
                        )
                    )
                    new_state, new_obs = envs.reset(
                        self.env_config, envs.episode_seed(state.rng)
                    )
                    self.states[e] = new_state
                    self.obs[e] = new_obs
                    next_hidden[e] = 0.0
                    next_incoming[e] = 0.0
                    self.starts[e] = True
                    self.episode_ids[e] += 1
                    self.ep_reward[e] = 0.0
                    self.ep_len[e] = 0
                else:
                    self.obs[e] = result.observations
            self.hidden = next_hidden
            self.incoming = next_incoming

        bootstrap = team_values(team, self.obs, self.incoming, self.hidden)
        self.env_steps += length * n_envs
        return RolloutBatch(
            obs=obs,
            actions=actions,
            rewards=rewards,
            dones=dones,
            starts=starts,
            active=active,
            messages=messages,
            incoming=incoming,
            values=values,
            log_probs=log_probs,
            hidden0=hidden0,
            bootstrap_values=bootstrap,
            episode_ids=episode_ids,
            episodes=episodes,
        )


def collect_rollout(
    collector: RolloutCollector, team: Sequence[AgentParams], segment_length: int
) -> RolloutBatch:
    return collector.collect(team, segment_length)


# ---------------------------------------------------------------------------
# Returns and losses
# ---------------------------------------------------------------------------


def nstep_returns(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    gamma: float = 0.99,
    n: int = 5,
) -> np.ndarray:
    """Truncated n-step targets.

    ``rewards`` and ``dones`` are ``[T, ...]``; ``values`` is ``[T + 1, ...]``
    with the bootstrap value last. A done at ``t + k`` ends the sum there
    without bootstrapping; near the segment end fewer than *n* rewards are
    summed before bootstrapping.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    values = np.asarray(values, dtype=np.float64)
    length = rewards.shape[0]
    if dones.shape != rewards.shape[: dones.ndim] or values.shape[0] != length + 1:
        raise ValueError(
            f"length mismatch: rewards {rewards.shape}, values {values.shape}, "
            f"dones {dones.shape}"
        )
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    done = dones.reshape(dones.shape + (1,) * (rewards.ndim - dones.ndim))
    out = np.zeros_like(rewards)
    for t in range(length):
        horizon = min(n, length - t)
        total = np.zeros(rewards.shape[1:])
        alive = np.ones(rewards.shape[1:])
        for k in range(horizon):
            total = total + alive * gamma**k * rewards[t + k]
            alive = alive * (1.0 - done[t + k])
        out[t] = total + alive * gamma**horizon * values[t + horizon]
    return out


@dataclass(frozen=True)
class A2CLosses:
    policy: Tensor
    value: Tensor
    entropy: Tensor


def a2c_losses(
    logits: Tensor,
    values: Tensor,
    actions: np.ndarray,
    returns: np.ndarray,
    mask: np.ndarray | None = None,
) -> A2CLosses:
    """Masked means of the policy-gradient, value and entropy terms.

    The advantage ``G - V`` treats ``V`` as a constant in the policy term.
    """
    weights = np.ones(len(actions)) if mask is None else np.asarray(mask, dtype=float)
    count = max(float(weights.sum()), 1.0)
    log_probs = T.log_softmax(logits, axis=-1)
    chosen = log_probs[np.arange(len(actions)), np.asarray(actions)]
    advantage = np.asarray(returns) - values.data
    policy = -T.sum(chosen * (advantage * weights)) / count
    value = T.sum(T.square(values - returns) * weights) / count
    entropy_per = -T.sum(T.exp(log_probs) * log_probs, axis=-1)
    entropy = T.sum(entropy_per * weights) / count
    return A2CLosses(policy=policy, value=value, entropy=entropy)


def clip_gradients(
    grads: Mapping[str, np.ndarray], max_norm: float = 2500.0
) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by ``max_norm / norm`` when their global norm exceeds it.

    Returns the (possibly scaled) gradients and the norm before clipping.
    """
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return dict(grads), norm


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss components of one agent for one iteration."""

    total: float
    policy: float
    value: float
    entropy: float
    comm: float


def _unroll(
    params: AgentParams,
    w: Mapping[str, Tensor],
    obs: Tensor,
    received: Tensor,
    starts: np.ndarray,
    hidden0: np.ndarray,
    update_spectral: bool,
) -> tuple[Tensor, Tensor, Tensor]:
    """Recompute an agent over a ``[T*E]``-flattened segment.

    Returns ``(logits, values, encoding)`` in the same row order.
    """
    spec = params.spec
    length, n_envs = starts.shape
    encoding = encode_observation(spec, w, obs)
    x = T.concat([encoding, encode_messages(spec, w, received)])
    gru = GRUParams(w["gru.w_ih"], w["gru.w_hh"], w["gru.b_ih"], w["gru.b_hh"])
    h = Tensor(hidden0)
    states: list[Tensor] = []
    for t in range(length):
        if t > 0:
            h = h * (1.0 - starts[t].astype(np.float64))[:, None]
        h = gru_step(x[t * n_envs : (t + 1) * n_envs], h, gru)
        states.append(h)
    logits, values = heads(params, w, T.concat(states, axis=0), update_spectral)
    return logits, values, encoding


def _flat(a: np.ndarray) -> np.ndarray:
    """Merge the leading ``[T, E]`` axes."""
    return a.reshape((a.shape[0] * a.shape[1],) + a.shape[2:])


def _received_inputs(
    routing: MessageRouting,
    batch: RolloutBatch,
    agent: int,
    sender_messages: Sequence[Tensor] | None,
) -> Tensor:
    """``[T*E, (N-1)*4]`` message input of *agent* for the learner pass."""
    if sender_messages is None:
        return Tensor(_flat(batch.received(agent)))
    n_envs = batch.n_envs
    parts = [Tensor(received_for(batch.incoming[0], agent))]
    for t in range(1, batch.segment_length):
        carried = batch.active[t - 1] & ~batch.starts[t][:, None]
        step_messages = [m[(t - 1) * n_envs : t * n_envs] for m in sender_messages]
        parts.append(route_received(routing, step_messages, agent, carried))
    return T.concat(parts, axis=0)


def _message_batch(
    batch: RolloutBatch, agent: int, own: Tensor
) -> MessageBatch:
    """Every message of the segment with *agent*'s own ones tracked."""
    length, n_envs, n = batch.active.shape
    parts = [
        own if j == agent else Tensor(_flat(batch.messages[:, :, j]))
        for j in range(n)
    ]
    timestep = np.broadcast_to(np.arange(length)[:, None], (length, n_envs)).ravel()
    trajectory = batch.trajectory_ids().ravel()
    return MessageBatch(
        messages=T.concat(parts, axis=0),
        trajectory=np.tile(trajectory, n),
        timestep=np.tile(timestep, n),
        agent=np.repeat(np.arange(n), length * n_envs),
        active=np.concatenate([_flat(batch.active[:, :, j]) for j in range(n)]),
        tracked=np.repeat(np.arange(n) == agent, length * n_envs),
    )


def agent_loss(
    agent: int,
    team: Sequence[AgentParams],
    w: Mapping[str, Tensor],
    batch: RolloutBatch,
    config: ExperimentConfig,
    received: Tensor,
    rng: np.random.Generator,
    update_spectral: bool = True,
) -> tuple[Tensor, dict[str, float], Tensor]:
    """Total loss of one agent on a segment.

    Returns ``(loss, components, encoding)``.
    """
    params = team[agent]
    method = params.spec.method
    obs = Tensor(_flat(batch.obs[:, :, agent]))
    logits, values, encoding = _unroll(
        params, w, obs, received, batch.starts, batch.hidden0[:, agent], update_spectral
    )
    value_seq = np.concatenate(
        [batch.values[:, :, agent], batch.bootstrap_values[None, :, agent]]
    )
    returns = nstep_returns(
        batch.rewards[:, :, agent], value_seq, batch.dones, config.gamma, config.n_step
    )
    mask = _flat(batch.active[:, :, agent])
    actions = _flat(batch.actions[:, :, agent])
    a2c = a2c_losses(logits, values, actions, _flat(returns), mask)
    loss = (
        a2c.policy
        + config.value_coef * a2c.value
        - config.entropy_coef * a2c.entropy
    )

    comm = Tensor(np.array(0.0))
    if method in CACL_METHODS:
        own = message_from_encoding(w, T.detach(encoding))
        contrastive = config.contrastive_config()
        comm = cacl_loss(_message_batch(batch, agent, own), contrastive, rng)
        loss = loss + contrastive.kappa * comm
    elif method in AECOMM_METHODS:
        own = message_from_encoding(w, T.detach(encoding))
        comm = aecomm_loss(obs.data, own, w)
        loss = loss + config.aecomm_coef * comm
    elif method == "pl":
        zeros = Tensor(np.zeros(received.shape))
        logits_bar, _, _ = _unroll(
            params, w, obs, zeros, batch.starts, batch.hidden0[:, agent], False
        )
        comm = pl_loss(logits, logits_bar, mask)
        loss = loss + config.pl_coef * comm

    components = {
        "policy": float(a2c.policy.data),
        "value": float(a2c.value.data),
        "entropy": float(a2c.entropy.data),
        "comm": float(comm.data),
        "total": float(loss.data),
    }
    return loss, components, encoding


def _check_finite(iteration: int, agent: int, components: Mapping[str, float]) -> None:
    if not all(np.isfinite(v) for v in components.values()):
        detail = ", ".join(f"{k}={v}" for k, v in components.items())
        raise NonFiniteLossError(
            f"non-finite loss at iteration {iteration}, agent {agent}: {detail}"
        )


def compute_gradients(
    team: Sequence[AgentParams],
    batch: RolloutBatch,
    config: ExperimentConfig,
    rng: np.random.Generator,
    loss_agents: Sequence[int] | None = None,
    joint: bool | None = None,
    iteration: int = 0,
) -> tuple[list[dict[str, np.ndarray]], list[LossBreakdown]]:
    """Gradients of every agent's parameters and the loss components.

    Decentralised methods differentiate each agent's loss on its own tape.
    DIAL variants, or ``joint=True``, differentiate the sum of the losses of
    *loss_agents* (default: all) on one tape; received messages are then
    recomputed from the senders' tracked parameters and detached or not
    according to the method's routing.

    Raises
    ------
    NonFiniteLossError
        If a loss component is NaN or infinite.
    """
    n = len(team)
    routing = message_routing(team[0].spec.method)
    which = list(range(n)) if loss_agents is None else list(loss_agents)
    use_joint = routing.joint_backward if joint is None else joint
    breakdown: dict[int, LossBreakdown] = {}

    if not use_joint:
        grads: list[dict[str, np.ndarray]] = [
            {k: np.zeros_like(v) for k, v in p.weights.items()} for p in team
        ]
        for i in which:
            tape = GradTape()
            w = tape.watch_all(team[i].weights)
            received = _received_inputs(routing, batch, i, None)
            loss, components, _ = agent_loss(i, team, w, batch, config, received, rng)
            _check_finite(iteration, i, components)
            grads[i] = tape.backward(loss)
            breakdown[i] = LossBreakdown(**components)
    else:
        tape = GradTape()
        ws = [
            tape.watch_all(p.weights, prefix=f"agent{i}/")
            for i, p in enumerate(team)
        ]
        senders: list[Tensor] = []
        for i, p in enumerate(team):
            obs = Tensor(_flat(batch.obs[:, :, i]))
            if p.spec.communicates:
                encoding = encode_observation(p.spec, ws[i], obs)
                senders.append(message_from_encoding(ws[i], encoding))
            else:
                senders.append(Tensor(np.zeros((obs.shape[0], p.spec.message_dim))))
        total: Tensor | None = None
        for i in which:
            received = _received_inputs(routing, batch, i, senders)
            loss, components, _ = agent_loss(
                i, team, ws[i], batch, config, received, rng
            )
            _check_finite(iteration, i, components)
            breakdown[i] = LossBreakdown(**components)
            total = loss if total is None else total + loss
        if total is None:
            raise ValueError("loss_agents is empty")
        flat = tape.backward(total)
        grads = [
            {k: flat[f"agent{i}/{k}"] for k in p.weights} for i, p in enumerate(team)
        ]
    empty = LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0)
    return grads, [breakdown.get(i, empty) for i in range(n)]


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IterationStats:
    iteration: int
    env_steps: int
    losses: tuple[LossBreakdown, ...]
    grad_norms: tuple[float, ...]
    episodes: tuple[EpisodeStats, ...]


class Learner:
    """Owns a team, its optimisers and the rollout collector of one run."""

    def __init__(
        self, config: ExperimentConfig, team: list[AgentParams] | None = None
    ) -> None:
        self.config = config
        self.env_config = config.env_config()
        if team is None:
            team = init_team(self.env_config, config.method, config.seed)
        self.team = team
        self.optimizers = [
            Adam(p.weights, lr=config.lr, eps=config.adam_eps) for p in self.team
        ]
        self.collector = RolloutCollector(self.env_config, config.n_envs, config.seed)
        self.rng = np.random.default_rng([config.seed, _STREAM_LEARNER])
        self.iteration = 0

    @property
    def spec(self) -> AgentSpec:
        return self.team[0].spec

    @property
    def env_steps(self) -> int:
        return self.collector.env_steps

    def step(self) -> IterationStats:
        batch = self.collector.collect(self.team, self.config.segment_length)
        self.iteration += 1
        grads, losses = compute_gradients(
            self.team, batch, self.config, self.rng, iteration=self.iteration
        )
        norms: list[float] = []
        for i, (params, optimizer) in enumerate(zip(self.team, self.optimizers)):
            clipped, norm = clip_gradients(grads[i], self.config.grad_clip)
            if not np.isfinite(norm):
                raise NonFiniteLossError(
                    f"non-finite gradient norm at iteration {self.iteration}, agent {i}"
                )
            optimizer.step(params.weights, clipped)
            norms.append(norm)
        return IterationStats(
            iteration=self.iteration,
            env_steps=self.env_steps,
            losses=tuple(losses),
            grad_norms=tuple(norms),
            episodes=tuple(batch.episodes),
        )


def _append_csv(path: Path, row: Mapping[str, Any], columns: Sequence[str]) -> None:
    frame = pd.DataFrame([row], columns=list(columns))
    frame.to_csv(
        path, mode="a", header=not path.exists(), index=False, float_format="%.10g"
    )


def _mean_or_nan(values: Sequence[float]) -> float:
    return float(np.mean(values)) if values else float("nan")


def metrics_row(stats: Sequence[IterationStats]) -> dict[str, Any]:
    """Aggregate iterations since the last row into one metrics record."""
    last = stats[-1]
    episodes = [e for s in stats for e in s.episodes]
    losses = [loss for s in stats for loss in s.losses]
    norms = [n for s in stats for n in s.grad_norms]
    return {
        "iteration": last.iteration,
        "env_steps": last.env_steps,
        "mean_ep_reward": _mean_or_nan([e.reward for e in episodes]),
        "mean_ep_len": _mean_or_nan([e.length for e in episodes]),
        "success_rate": _mean_or_nan([e.success for e in episodes]),
        "loss_policy": float(np.mean([x.policy for x in losses])),
        "loss_value": float(np.mean([x.value for x in losses])),
        "loss_comm": float(np.mean([x.comm for x in losses])),
        "grad_norm": float(np.mean(norms)),
    }


@dataclass(frozen=True)
class TrainResult:
    run_dir: Path
    metrics_path: Path
    eval_path: Path
    checkpoints: tuple[Path, ...]
    iterations: int
    env_steps: int


def checkpoint_dir(run_dir: Path, env_steps: int) -> Path:
    return run_dir / "checkpoints" / f"step-{env_steps:09d}"


def checkpoint_metadata(
    config: ExperimentConfig, env_steps: int, iteration: int
) -> dict[str, Any]:
    return {
        "method": config.method,
        "env": asdict(config.env_config()),
        "seed": config.seed,
        "env_steps": env_steps,
        "iteration": iteration,
        "config_hash": config.content_hash(),
    }


def train(config: ExperimentConfig, run_dir: Path) -> TrainResult:
    """Run the full training loop, writing metrics, evaluations and checkpoints.

    Output layout under *run_dir*::

        metrics.csv                       one row per log interval
        eval.csv                          greedy evaluation curve
        checkpoints/step-<env_steps>/     agent-<i>/ + checkpoint.json

    Raises
    ------
    NonFiniteLossError
        If a loss or gradient norm becomes NaN or infinite.
    """
    run_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = run_dir / METRICS_NAME
    eval_path = run_dir / EVAL_NAME
    prefix = f"env-{config.env}/method-{config.method}/seed-{config.seed}"
    learner = Learner(config)
    env_config = learner.env_config
    logger.info(
        "%s | %d iteration(s) of %d env steps, %d parameters per agent",
        prefix,
        config.n_iterations,
        config.steps_per_iteration,
        learner.team[0].n_parameters,
    )

    eval_columns = [
        "iteration",
        "env_steps",
        "mean_ep_reward",
        "mean_ep_len",
        "success_rate",
    ]
    if env_config.env_id == PREDATOR_PREY:
        eval_columns += ["no_prey", "one_prey", "two_prey"]

    checkpoints: list[Path] = []
    pending: list[IterationStats] = []
    started = time.perf_counter()
    for _ in range(config.n_iterations):
        stats = learner.step()
        pending.append(stats)
        it = stats.iteration
        last = it == config.n_iterations

        if it % config.log_interval == 0 or last:
            row = metrics_row(pending)
            _append_csv(metrics_path, row, METRICS_COLUMNS)
            pending.clear()
            logger.info(
                "%s | iteration %d, %d env steps, reward %.3f, comm loss %.4f (%.1fs)",
                prefix,
                it,
                stats.env_steps,
                row["mean_ep_reward"],
                row["loss_comm"],
                time.perf_counter() - started,
            )

        if it % config.eval_interval == 0 or last:
            summary = evaluate_team(
                learner.team,
                env_config,
                episodes=config.eval_episodes,
                seed=eval_seed(config.seed, it),
            )
            eval_row = {
                "iteration": it,
                "env_steps": stats.env_steps,
                **summary.as_row(),
            }
            _append_csv(eval_path, eval_row, eval_columns)

        if it % config.checkpoint_interval == 0 or last:
            path = checkpoint_dir(run_dir, stats.env_steps)
            metadata = checkpoint_metadata(config, stats.env_steps, it)
            save_team(learner.team, path, metadata)
            checkpoints.append(path)
            logger.info("%s | checkpoint written: %s", prefix, path)

    return TrainResult(
        run_dir=run_dir,
        metrics_path=metrics_path,
        eval_path=eval_path,
        checkpoints=tuple(checkpoints),
        iterations=learner.iteration,
        env_steps=learner.env_steps,
    )


def eval_seed(seed: int, iteration: int) -> int:
    """Seed of the periodic evaluation after *iteration*."""
    seq = np.random.SeedSequence([seed, _STREAM_EVAL, iteration])
    return int(seq.generate_state(1)[0])
