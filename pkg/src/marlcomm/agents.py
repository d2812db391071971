"""Decentralised recurrent actor-critic agents with a continuous message channel.

Every agent owns its parameters outright (no sharing across agents):

- observation encoder: one FC layer (Predator-Prey, Traffic-Junction) or two
  3x3 conv layers followed by three FC layers (Find-Goal), output 32;
- message head: FC 32 -> 4 with sigmoid, conditioned only on the encoding;
- message encoder over the ``(N - 1) * 4`` received values, output 8
  (one hidden layer) or 16 for Traffic-Junction (two hidden layers);
- GRU over ``encoding ⊕ message encoding`` with hidden size 32;
- policy and value heads: FC 32, spectrally normalised FC 32, output;
- decoder (AEComm methods only): FC 4 -> 32 -> observation.

Received messages are ordered by ascending sender index with the receiver
skipped; at the first step of an episode they are zero vectors. IAC agents
carry no message head or message encoder and feed a zero encoding to the GRU.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from marlcomm.envs.core import FIND_GOAL, TRAFFIC_JUNCTION, EnvConfig
from marlcomm.numerics import tensor as T
from marlcomm.numerics.layers import (
    GRUParams,
    SpectralState,
    conv2d,
    gru_step,
    init_conv,
    init_gru,
    init_linear,
    linear,
    spectral_normalize,
)
from marlcomm.numerics.serialize import load_params, save_params
from marlcomm.numerics.tensor import Tensor

logger = logging.getLogger(__name__)

METHODS = ("iac", "dial", "pl", "aecomm", "cacl", "cacl_dial", "aecomm_dial")
DIAL_METHODS = frozenset({"dial", "cacl_dial", "aecomm_dial"})
AECOMM_METHODS = frozenset({"aecomm", "aecomm_dial"})
CACL_METHODS = frozenset({"cacl", "cacl_dial"})

MESSAGE_DIM = 4
HIDDEN = 32
SPECTRAL_KEYS = ("pi.fc1.w", "v.fc1.w")
CHECKPOINT_NAME = "checkpoint.json"


def check_method(method: str) -> str:
    if method not in METHODS:
        raise ValueError(f"Unknown method {method!r}; expected one of {list(METHODS)}")
    return method


@dataclass(frozen=True)
class AgentSpec:
    """Architecture of one agent, derived from the environment and method."""

    env_id: str
    method: str
    obs_dim: int
    n_actions: int
    n_agents: int
    message_dim: int = MESSAGE_DIM
    hidden: int = HIDDEN

    @classmethod
    def for_env(cls, env_config: EnvConfig, method: str) -> AgentSpec:
        return cls(
            env_id=env_config.env_id,
            method=check_method(method),
            obs_dim=env_config.obs_dim,
            n_actions=env_config.n_actions,
            n_agents=env_config.n_agents,
        )

    @property
    def communicates(self) -> bool:
        return self.method != "iac"

    @property
    def has_decoder(self) -> bool:
        return self.method in AECOMM_METHODS

    @property
    def received_dim(self) -> int:
        return (self.n_agents - 1) * self.message_dim

    @property
    def message_encoder_sizes(self) -> tuple[int, ...]:
        if self.env_id == TRAFFIC_JUNCTION:
            return (HIDDEN, HIDDEN, 16)
        return (HIDDEN, 8)

    @property
    def message_encoding_dim(self) -> int:
        return self.message_encoder_sizes[-1]

    @property
    def fov_cells(self) -> int:
        # Find-Goal observations are 3 channels over the window plus position.
        return (self.obs_dim - 2) // 3


@dataclass
class AgentParams:
    """Named weight arrays plus the spectral-norm state of the penultimate layers."""

    spec: AgentSpec
    weights: dict[str, np.ndarray]
    spectral: dict[str, SpectralState] = field(default_factory=dict)

    def copy(self) -> AgentParams:
        return AgentParams(
            spec=self.spec,
            weights={k: v.copy() for k, v in self.weights.items()},
            spectral={k: s.copy() for k, s in self.spectral.items()},
        )

    def constants(self) -> dict[str, Tensor]:
        """Untracked tensors over the current weights."""
        return {k: Tensor(v) for k, v in self.weights.items()}

    @property
    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.weights.values()))


@dataclass(frozen=True)
class AgentStep:
    """Output of one :func:`act` call."""

    action: int
    log_prob: float
    entropy: float
    value: float
    message: np.ndarray
    hidden: np.ndarray


@dataclass(frozen=True)
class TeamStep:
    """Batched step of a whole team over ``E`` environment instances.

    Arrays are ``[E, N]`` except ``messages`` ``[E, N, 4]`` and ``hidden``
    ``[E, N, 32]``.
    """

    actions: np.ndarray
    log_probs: np.ndarray
    entropies: np.ndarray
    values: np.ndarray
    messages: np.ndarray
    hidden: np.ndarray


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------


def _add_linear(
    weights: dict[str, np.ndarray],
    rng: np.random.Generator,
    name: str,
    out_features: int,
    in_features: int,
) -> None:
    weights[f"{name}.w"], weights[f"{name}.b"] = init_linear(
        rng, out_features, in_features
    )


def init_agent(spec: AgentSpec, rng: np.random.Generator) -> AgentParams:
    weights: dict[str, np.ndarray] = {}
    if spec.env_id == FIND_GOAL:
        weights["obs.conv0.k"], weights["obs.conv0.b"] = init_conv(rng, 16, 3)
        weights["obs.conv1.k"], weights["obs.conv1.b"] = init_conv(rng, 32, 16)
        _add_linear(weights, rng, "obs.fc0", HIDDEN, 32 * spec.fov_cells + 2)
        _add_linear(weights, rng, "obs.fc1", HIDDEN, HIDDEN)
        _add_linear(weights, rng, "obs.fc2", HIDDEN, HIDDEN)
    else:
        _add_linear(weights, rng, "obs.fc0", HIDDEN, spec.obs_dim)

    if spec.communicates:
        _add_linear(weights, rng, "msg_head", spec.message_dim, HIDDEN)
        in_features = spec.received_dim
        for k, width in enumerate(spec.message_encoder_sizes):
            _add_linear(weights, rng, f"msg_enc.fc{k}", width, in_features)
            in_features = width

    for name, value in init_gru(
        rng, HIDDEN + spec.message_encoding_dim, spec.hidden
    ).items():
        weights[f"gru.{name}"] = value

    for head, out in (("pi", spec.n_actions), ("v", 1)):
        _add_linear(weights, rng, f"{head}.fc0", HIDDEN, spec.hidden)
        _add_linear(weights, rng, f"{head}.fc1", HIDDEN, HIDDEN)
        _add_linear(weights, rng, f"{head}.out", out, HIDDEN)

    if spec.has_decoder:
        _add_linear(weights, rng, "dec.fc0", HIDDEN, spec.message_dim)
        _add_linear(weights, rng, "dec.out", spec.obs_dim, HIDDEN)

    spectral = {key: SpectralState.init(rng, HIDDEN) for key in SPECTRAL_KEYS}
    return AgentParams(spec=spec, weights=weights, spectral=spectral)


def init_team(env_config: EnvConfig, method: str, seed: int) -> list[AgentParams]:
    """Independently initialised agents, one RNG stream per agent."""
    spec = AgentSpec.for_env(env_config, method)
    streams = np.random.SeedSequence(seed).spawn(env_config.n_agents)
    return [init_agent(spec, np.random.default_rng(s)) for s in streams]


# ---------------------------------------------------------------------------
# Forward pieces (operate on ``[B, ...]`` batches of tensors)
# ---------------------------------------------------------------------------


def _batch(x: Any) -> tuple[Tensor, bool]:
    t = T.as_tensor(x)
    if t.ndim == 1:
        return T.reshape(t, (1, t.shape[0])), True
    return t, False


def _dense(w: Mapping[str, Tensor], name: str, x: Tensor) -> Tensor:
    return linear(x, w[f"{name}.w"], w[f"{name}.b"])


def encode_observation(spec: AgentSpec, w: Mapping[str, Tensor], obs: Tensor) -> Tensor:
    """``[B, obs_dim]`` -> ``[B, 32]``."""
    if obs.shape[-1] != spec.obs_dim:
        raise ValueError(
            f"observation has {obs.shape[-1]} features, "
            f"{spec.env_id} expects {spec.obs_dim}"
        )
    if spec.env_id != FIND_GOAL:
        return T.relu(_dense(w, "obs.fc0", obs))
    batch = obs.shape[0]
    side = int(round(np.sqrt(spec.fov_cells)))
    image = T.reshape(obs[:, : 3 * spec.fov_cells], (batch, 3, side, side))
    x = T.relu(conv2d(image, w["obs.conv0.k"], w["obs.conv0.b"]))
    x = T.relu(conv2d(x, w["obs.conv1.k"], w["obs.conv1.b"]))
    flat = T.reshape(x, (batch, 32 * spec.fov_cells))
    x = T.concat([flat, obs[:, 3 * spec.fov_cells :]])
    for name in ("obs.fc0", "obs.fc1", "obs.fc2"):
        x = T.relu(_dense(w, name, x))
    return x


def message_from_encoding(w: Mapping[str, Tensor], encoding: Tensor) -> Tensor:
    return T.sigmoid(_dense(w, "msg_head", encoding))


def encode_messages(
    spec: AgentSpec, w: Mapping[str, Tensor], received: Tensor
) -> Tensor:
    """``[B, (N-1)*4]`` -> ``[B, enc]``; zeros for agents that do not communicate."""
    if received.shape[-1] != spec.received_dim:
        raise ValueError(
            f"received messages have {received.shape[-1]} values, "
            f"expected {spec.received_dim}"
        )
    if not spec.communicates:
        return Tensor(np.zeros((received.shape[0], spec.message_encoding_dim)))
    x = received
    for k in range(len(spec.message_encoder_sizes)):
        x = T.relu(_dense(w, f"msg_enc.fc{k}", x))
    return x


def _gru(w: Mapping[str, Tensor]) -> GRUParams:
    return GRUParams(w["gru.w_ih"], w["gru.w_hh"], w["gru.b_ih"], w["gru.b_hh"])


def heads(
    params: AgentParams,
    w: Mapping[str, Tensor],
    hidden: Tensor,
    update_spectral: bool = False,
) -> tuple[Tensor, Tensor]:
    """Policy logits ``[B, A]`` and values ``[B]`` from GRU states ``[B, 32]``."""
    out: list[Tensor] = []
    for head in ("pi", "v"):
        x = T.relu(_dense(w, f"{head}.fc0", hidden))
        w1 = spectral_normalize(
            w[f"{head}.fc1.w"], params.spectral[f"{head}.fc1.w"], update=update_spectral
        )
        x = T.relu(linear(x, w1, w[f"{head}.fc1.b"]))
        out.append(_dense(w, f"{head}.out", x))
    logits, value = out
    return logits, T.reshape(value, (value.shape[0],))


def forward(
    params: AgentParams,
    w: Mapping[str, Tensor],
    obs: Tensor,
    received: Tensor,
    hidden: Tensor,
    update_spectral: bool = False,
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """One batched agent step.

    Returns ``(logits, values, messages, new_hidden)``; ``messages`` is zero for
    agents that do not communicate.
    """
    spec = params.spec
    encoding = encode_observation(spec, w, obs)
    if spec.communicates:
        message = message_from_encoding(w, encoding)
    else:
        message = Tensor(np.zeros((obs.shape[0], spec.message_dim)))
    x = T.concat([encoding, encode_messages(spec, w, received)])
    new_hidden = gru_step(x, hidden, _gru(w))
    logits, values = heads(params, w, new_hidden, update_spectral)
    return logits, values, message, new_hidden


# ---------------------------------------------------------------------------
# Public single-agent operations
# ---------------------------------------------------------------------------


def produce_message(obs: Any, params: AgentParams) -> np.ndarray:
    """Message ``sigmoid(head(encode(obs)))`` for ``[obs_dim]`` or ``[B, obs_dim]``."""
    if not params.spec.communicates:
        raise ValueError("IAC agents do not emit messages")
    x, single = _batch(obs)
    w = params.constants()
    message = message_from_encoding(w, encode_observation(params.spec, w, x)).data
    return message[0] if single else message


def sample_actions(
    logits: np.ndarray, uniforms: np.ndarray, greedy: bool = False
) -> np.ndarray:
    """Categorical draws by inverse CDF, or argmax (lowest index on ties)."""
    if greedy:
        return np.argmax(logits, axis=-1)
    probs = np.exp(logits - logits.max(axis=-1, keepdims=True))
    cdf = np.cumsum(probs / probs.sum(axis=-1, keepdims=True), axis=-1)
    actions = (cdf < uniforms[..., None]).sum(axis=-1)
    return np.minimum(actions, logits.shape[-1] - 1)


def _policy_stats(
    logits: np.ndarray, actions: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    log_probs = logits - logits.max(axis=-1, keepdims=True)
    log_probs = log_probs - np.log(np.exp(log_probs).sum(axis=-1, keepdims=True))
    chosen = np.take_along_axis(log_probs, actions[..., None], axis=-1)[..., 0]
    entropy = -(np.exp(log_probs) * log_probs).sum(axis=-1)
    return chosen, entropy


def act(
    obs: Any,
    received: Any,
    hidden: Any,
    params: AgentParams,
    rng: np.random.Generator,
    greedy: bool = False,
) -> AgentStep:
    """Choose an action for one agent.

    Parameters
    ----------
    received
        The ``N - 1`` messages emitted by the other agents at the previous step,
        ascending sender index; zeros at the first step of an episode.
    """
    spec = params.spec
    received_arr = np.asarray(received, dtype=np.float64).reshape(1, spec.received_dim)
    x, _ = _batch(obs)
    h, _ = _batch(hidden)
    logits, values, message, new_hidden = forward(
        params, params.constants(), x, Tensor(received_arr), h
    )
    uniform = np.array([rng.random()])
    action = sample_actions(logits.data, uniform, greedy)
    log_prob, entropy = _policy_stats(logits.data, action)
    return AgentStep(
        action=int(action[0]),
        log_prob=float(log_prob[0]),
        entropy=float(entropy[0]),
        value=float(values.data[0]),
        message=message.data[0],
        hidden=new_hidden.data[0],
    )


def decode_observation(message: Any, params: AgentParams) -> Tensor:
    """AEComm reconstruction of the observation from a message."""
    if not params.spec.has_decoder:
        raise ValueError(
            "decode_observation needs an AEComm method, "
            f"agent uses {params.spec.method!r}"
        )
    return decode_with(params.constants(), T.as_tensor(message))


def decode_with(w: Mapping[str, Tensor], message: Tensor) -> Tensor:
    return _dense(w, "dec.out", T.relu(_dense(w, "dec.fc0", message)))


# ---------------------------------------------------------------------------
# Team helpers
# ---------------------------------------------------------------------------


def received_for(messages: np.ndarray, agent: int) -> np.ndarray:
    """Messages ``[..., N, 4]`` as the flat ``[..., (N-1)*4]`` input of *agent*."""
    others = np.delete(messages, agent, axis=-2)
    return others.reshape(*others.shape[:-2], -1)


def deliver(messages: np.ndarray, active: np.ndarray) -> np.ndarray:
    """Zero the messages of senders that were not active when emitting."""
    return messages * active[..., None]


def team_act(
    team: Sequence[AgentParams],
    obs: np.ndarray,
    prev_messages: np.ndarray,
    hidden: np.ndarray,
    rng: np.random.Generator,
    greedy: bool = False,
) -> TeamStep:
    """Step every agent of *team* over ``E`` instances at once.

    ``obs`` is ``[E, N, obs_dim]``, ``prev_messages`` the delivered messages of
    the previous step ``[E, N, 4]`` and ``hidden`` ``[E, N, 32]``. One uniform
    per (instance, agent) is drawn from *rng* each call, greedy or not.
    """
    n_envs, n_agents = obs.shape[:2]
    if len(team) != n_agents:
        raise ValueError(f"team has {len(team)} agents, observations have {n_agents}")
    uniforms = rng.random((n_envs, n_agents))
    actions = np.zeros((n_envs, n_agents), dtype=np.int64)
    log_probs = np.zeros((n_envs, n_agents))
    entropies = np.zeros((n_envs, n_agents))
    values = np.zeros((n_envs, n_agents))
    messages = np.zeros((n_envs, n_agents, MESSAGE_DIM))
    new_hidden = np.zeros_like(hidden)
    for i, params in enumerate(team):
        logits, v, m, h = forward(
            params,
            params.constants(),
            Tensor(obs[:, i]),
            Tensor(received_for(prev_messages, i)),
            Tensor(hidden[:, i]),
        )
        actions[:, i] = sample_actions(logits.data, uniforms[:, i], greedy)
        log_probs[:, i], entropies[:, i] = _policy_stats(logits.data, actions[:, i])
        values[:, i] = v.data
        messages[:, i] = m.data
        new_hidden[:, i] = h.data
    return TeamStep(actions, log_probs, entropies, values, messages, new_hidden)


def team_values(
    team: Sequence[AgentParams],
    obs: np.ndarray,
    prev_messages: np.ndarray,
    hidden: np.ndarray,
) -> np.ndarray:
    """Value estimates ``[E, N]`` without sampling actions."""
    values = np.zeros(obs.shape[:2])
    for i, params in enumerate(team):
        _, v, _, _ = forward(
            params,
            params.constants(),
            Tensor(obs[:, i]),
            Tensor(received_for(prev_messages, i)),
            Tensor(hidden[:, i]),
        )
        values[:, i] = v.data
    return values


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_team(
    team: Sequence[AgentParams], directory: Path, metadata: Mapping[str, Any]
) -> Path:
    """Write ``agent-<i>/`` parameter directories plus ``checkpoint.json``."""
    directory.mkdir(parents=True, exist_ok=True)
    for i, params in enumerate(team):
        arrays = dict(params.weights)
        arrays.update({f"spectral/{k}": s.u for k, s in params.spectral.items()})
        save_params(arrays, directory / f"agent-{i}", {"agent": i, **metadata})
    path = directory / CHECKPOINT_NAME
    with open(path, "w") as f:
        json.dump({"n_agents": len(team), **metadata}, f, indent=2)
    return path


def load_team(directory: Path) -> tuple[list[AgentParams], dict[str, Any]]:
    """Read a checkpoint written by :func:`save_team`.

    Raises
    ------
    FileNotFoundError
        If ``checkpoint.json`` or an agent directory is missing.
    """
    with open(directory / CHECKPOINT_NAME) as f:
        metadata: dict[str, Any] = json.load(f)
    env_config = env_config_from_dict(metadata["env"])
    spec = AgentSpec.for_env(env_config, metadata["method"])
    team: list[AgentParams] = []
    for i in range(int(metadata["n_agents"])):
        arrays, _ = load_params(directory / f"agent-{i}")
        spectral = {
            k.removeprefix("spectral/"): SpectralState(u=v)
            for k, v in arrays.items()
            if k.startswith("spectral/")
        }
        weights = {k: v for k, v in arrays.items() if not k.startswith("spectral/")}
        team.append(AgentParams(spec=spec, weights=weights, spectral=spectral))
    return team, metadata


def env_config_from_dict(raw: Mapping[str, Any]) -> EnvConfig:
    """Rebuild the :class:`EnvConfig` stored in checkpoint metadata."""
    out = dict(raw)
    if "prey_move_probs" in out:
        out["prey_move_probs"] = tuple(out["prey_move_probs"])
    return EnvConfig(**out)
