"""Communication-grounding objectives and message gradient routing.

- :func:`cacl_loss`: supervised-contrastive alignment of messages. Positives of
  an anchor are the other messages of the same trajectory within a timestep
  window; the denominator runs over every other message in the batch.
- :func:`aecomm_loss`: messages must reconstruct the sender's observation.
- :func:`pl_loss`: positive listening, rewarding policies that change when
  messages are present.
- :func:`message_routing` / :func:`dial_route`: whether received messages are
  detached at the receiver (decentralised methods) or carry gradient back to
  the sender (DIAL variants).
"""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from marlcomm.agents import DIAL_METHODS, check_method, decode_with
from marlcomm.numerics import tensor as T
from marlcomm.numerics.tensor import Tensor

logger = logging.getLogger(__name__)

CONTRASTIVE_MODES = ("supcon", "simclr")


@dataclass(frozen=True)
class MessageBatch:
    """Messages ``[K, D]`` keyed by (trajectory, timestep, agent).

    ``trajectory`` ids are unique per (environment instance, episode), so a
    trajectory never spans an episode boundary. Inactive messages (empty
    Traffic-Junction slots) are never positives nor part of any denominator.
    ``tracked`` marks which messages carry gradient; it is informational.
    """

    messages: Tensor
    trajectory: np.ndarray
    timestep: np.ndarray
    agent: np.ndarray
    active: np.ndarray
    tracked: np.ndarray | None = None

    def __post_init__(self) -> None:
        k = self.messages.shape[0]
        for name in ("trajectory", "timestep", "agent", "active"):
            if np.shape(getattr(self, name)) != (k,):
                raise ValueError(
                    f"MessageBatch.{name} must have shape ({k},), "
                    f"got {np.shape(getattr(self, name))}"
                )
        keys = set(
            zip(self.trajectory.tolist(), self.timestep.tolist(), self.agent.tolist())
        )
        if len(keys) != k:
            raise ValueError(
                "MessageBatch keys (trajectory, timestep, agent) must be unique"
            )

    def __len__(self) -> int:
        return int(self.messages.shape[0])


@dataclass(frozen=True)
class ContrastiveConfig:
    """Window span (odd, in timesteps), temperature, loss weight and mode."""

    window: int = 5
    temperature: float = 0.1
    kappa: float = 0.5
    mode: str = "supcon"

    def __post_init__(self) -> None:
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window must be an odd count >= 1, got {self.window}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.kappa < 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        if self.mode not in CONTRASTIVE_MODES:
            raise ValueError(
                f"mode must be one of {CONTRASTIVE_MODES}, got {self.mode!r}"
            )

    @property
    def half_window(self) -> int:
        return self.window // 2


def normalize_messages(batch: MessageBatch) -> Tensor:
    """Unit-norm copy of the batch messages (differentiable)."""
    return T.l2_normalize(batch.messages, axis=-1)


def positive_mask(
    batch: MessageBatch,
    config: ContrastiveConfig,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """``[K, K]`` boolean mask, row ``a`` marking the positives of anchor ``a``.

    In ``simclr`` mode each non-empty row keeps one uniformly drawn positive,
    which requires *rng*.
    """
    active = np.asarray(batch.active, dtype=bool)
    same = batch.trajectory[:, None] == batch.trajectory[None, :]
    gap = np.abs(batch.timestep[:, None] - batch.timestep[None, :])
    near = gap <= config.half_window
    mask = same & near & active[:, None] & active[None, :]
    np.fill_diagonal(mask, False)
    if config.mode == "supcon":
        return mask
    if rng is None:
        raise ValueError("simclr mode samples one positive per anchor and needs an rng")
    single = np.zeros_like(mask)
    for a in np.flatnonzero(mask.any(axis=1)):
        single[a, rng.choice(np.flatnonzero(mask[a]))] = True
    return single


def positives_for(
    anchor: tuple[int, int, int],
    batch: MessageBatch,
    config: ContrastiveConfig,
    rng: np.random.Generator | None = None,
) -> set[tuple[int, int, int]]:
    """Keys ``(trajectory, timestep, agent)`` of the positives of *anchor*."""
    keys = list(
        zip(batch.trajectory.tolist(), batch.timestep.tolist(), batch.agent.tolist())
    )
    try:
        row = keys.index(tuple(anchor))
    except ValueError:
        raise ValueError(f"anchor {anchor} is not in the batch") from None
    mask = positive_mask(batch, config, rng)
    return {keys[j] for j in np.flatnonzero(mask[row])}


def cacl_loss(
    batch: MessageBatch,
    config: ContrastiveConfig,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Contrastive alignment loss summed over anchors.

    Each active anchor with at least one positive contributes
    ``logsumexp_k(a·k/η) - mean_p(a·p/η)`` where ``k`` ranges over every other
    active message of the batch and ``p`` over its positives.
    """
    if len(batch) < 2:
        raise ValueError(f"cacl_loss needs at least 2 messages, got {len(batch)}")
    z = normalize_messages(batch)
    sim = T.matmul(z, T.transpose(z)) / config.temperature

    active = np.asarray(batch.active, dtype=bool)
    others = active[:, None] & active[None, :]
    np.fill_diagonal(others, False)
    pos = positive_mask(batch, config, rng)
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0

    log_denominator = T.masked_logsumexp(sim, others, axis=1)
    mean_positive = T.sum(sim * pos.astype(np.float64), axis=1) / np.maximum(n_pos, 1)
    terms = (log_denominator - mean_positive) * anchors.astype(np.float64)
    if np.any(terms.data < -1e-9):
        raise AssertionError(f"negative CACL anchor term {terms.data.min():.3e}")
    return T.sum(terms)


def aecomm_loss(
    observations: np.ndarray, messages: Tensor, decoder: Mapping[str, Tensor]
) -> Tensor:
    """Mean squared reconstruction error of *observations* from *messages*."""
    target = np.asarray(observations, dtype=np.float64)
    reconstruction = decode_with(decoder, messages)
    if reconstruction.shape != target.shape:
        raise ValueError(
            f"reconstruction shape {reconstruction.shape} "
            f"!= observations {target.shape}"
        )
    return T.mean(T.square(reconstruction - target))


def pl_loss(
    logits_with: Tensor,
    logits_without: Tensor,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Positive-listening loss over ``T`` steps of ``[T, A]`` policy logits.

    ``-(1/T) Σ_t [Σ_a |π(a) - π̄(a)| + Σ_a π(a) log π̄(a)]`` where ``π̄`` is the
    policy with received messages zeroed. *mask* selects the steps counted.
    """
    if logits_with.shape != logits_without.shape:
        raise ValueError(
            f"logit shapes differ: {logits_with.shape} vs {logits_without.shape}"
        )
    steps = np.ones(logits_with.shape[0]) if mask is None else np.asarray(mask, float)
    count = float(steps.sum())
    if count == 0:
        raise ValueError("pl_loss needs at least one step (T = 0)")
    pi = T.softmax(logits_with, axis=-1)
    log_pi_bar = T.log_softmax(logits_without, axis=-1)
    pi_bar = T.exp(log_pi_bar)
    per_step = T.sum(T.abs(pi - pi_bar), axis=-1) + T.sum(pi * log_pi_bar, axis=-1)
    return -T.sum(per_step * steps) / count


@dataclass(frozen=True)
class MessageRouting:
    """How received messages enter a receiver's computation graph."""

    method: str
    detach_received: bool
    joint_backward: bool


def message_routing(method: str) -> MessageRouting:
    dial = check_method(method) in DIAL_METHODS
    return MessageRouting(method=method, detach_received=not dial, joint_backward=dial)


def dial_route(method: str) -> MessageRouting:
    """Routing for DIAL variants: received messages stay on the graph."""
    if check_method(method) not in DIAL_METHODS:
        raise ValueError(f"dial_route needs a DIAL variant, got {method!r}")
    return message_routing(method)


def route_received(
    routing: MessageRouting,
    messages: Sequence[Tensor],
    receiver: int,
    sender_active: np.ndarray,
) -> Tensor:
    """Flat ``[B, (N-1)*4]`` input of *receiver* built from per-sender messages.

    *messages* holds one ``[B, 4]`` tensor per agent and *sender_active* is
    ``[B, N]``. Messages of inactive senders are zeroed.
    """
    parts = []
    for j, message in enumerate(messages):
        if j == receiver:
            continue
        m = T.detach(message) if routing.detach_received else message
        parts.append(m * sender_active[:, j : j + 1].astype(np.float64))
    return T.concat(parts, axis=-1)
