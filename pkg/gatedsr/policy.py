"""
Recurrent expression policy.

An ``nn.LSTMCell`` reads the (parent, sibling) one-hot observation of the next
open slot and a linear head scores every library token. Illegal tokens get a
logit of -inf, so their probability is exactly zero. ``masked_distribution``
is the only place log-probabilities and entropies are computed; sampling and
re-scoring both go through it.
"""
import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .constraints import EMPTY, ActionMask, ActionMasker, TraversalState
from .errors import ConfigError, MalformedTraversalError, NonFiniteError
from .expressions import TokenLibrary, Traversal
from .numerics import DTYPE, RngStream, log_softmax

logger = logging.getLogger(__name__)

INIT_RANGE = 0.08
FORGET_BIAS = 1.0

Hidden = Tuple[torch.Tensor, torch.Tensor]


class PolicyNetwork(nn.Module):
    def __init__(self, n_tokens: int, hidden_size: int = 32):
        super().__init__()
        self.n_tokens = n_tokens
        self.hidden_size = hidden_size
        self.input_dim = 2 * (n_tokens + 1)
        self.cell = nn.LSTMCell(self.input_dim, hidden_size, dtype=DTYPE)
        self.projection = nn.Linear(hidden_size, n_tokens, dtype=DTYPE)
        self.register_buffer("_eye", torch.eye(n_tokens + 1, dtype=DTYPE), persistent=False)

    def reset_parameters(self, generator: torch.Generator) -> "PolicyNetwork":
        with torch.no_grad():
            for name, param in self.named_parameters():
                if name.endswith("weight"):
                    param.uniform_(-INIT_RANGE, INIT_RANGE, generator=generator)
                else:
                    param.zero_()
            # torch orders the LSTM gate blocks as input, forget, cell, output
            self.cell.bias_ih[self.hidden_size:2 * self.hidden_size] = FORGET_BIAS
        return self

    def initial_hidden(self, batch: int) -> Hidden:
        zeros = torch.zeros(batch, self.hidden_size, dtype=DTYPE)
        return zeros, zeros.clone()

    def encode(self, parents: torch.Tensor, siblings: torch.Tensor) -> torch.Tensor:
        """Batched one-hot observations; ``EMPTY`` maps to the reserved last slot."""
        parents = torch.where(parents == EMPTY, self.n_tokens, parents)
        siblings = torch.where(siblings == EMPTY, self.n_tokens, siblings)
        return torch.cat([self._eye[parents], self._eye[siblings]], dim=-1)


def encode_observation(partial: Traversal, lib: TokenLibrary) -> np.ndarray:
    state = TraversalState(lib, partial)
    size = len(lib) + 1
    obs = np.zeros(2 * size, dtype=np.float64)
    obs[state.parent if state.parent != EMPTY else len(lib)] = 1.0
    obs[size + (state.sibling if state.sibling != EMPTY else len(lib))] = 1.0
    return obs


def policy_step(net: PolicyNetwork, obs: torch.Tensor, hidden: Hidden) -> Tuple[torch.Tensor, Hidden]:
    h, c = net.cell(obs, hidden)
    if not (torch.isfinite(h).all() and torch.isfinite(c).all()):
        raise NonFiniteError("non-finite recurrent state")
    return net.projection(h), (h, c)


def masked_distribution(logits: torch.Tensor, masks: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Log-probabilities and entropies of the distribution restricted to ``masks``."""
    logp = log_softmax(logits.masked_fill(~masks, float("-inf")))
    plogp = logp.exp() * logp.masked_fill(~masks, 0.0)
    return logp, -plogp.sum(dim=-1)


# ===================== Trajectories =====================

@dataclass
class StepRecord:
    observation: Tuple[int, int]  # (parent, sibling) token ids, EMPTY when absent
    action: int
    log_prob: float
    dist_entropy: float
    mask: ActionMask


@dataclass
class TrajectoryRecord:
    steps: List[StepRecord]
    traversal: Traversal
    reward: float = 0.0
    sequence_log_prob: float = field(init=False)

    def __post_init__(self):
        self.sequence_log_prob = float(sum(step.log_prob for step in self.steps))

    def __len__(self) -> int:
        return len(self.steps)


def sample_batch(
    net: PolicyNetwork,
    masker: ActionMasker,
    streams: Sequence[RngStream],
    forced: Optional[Sequence[Optional[Sequence[int]]]] = None,
) -> List[TrajectoryRecord]:
    """
    Sample one trajectory per stream.

    Trajectory i consumes only ``streams[i]``: one uniform per step, mapped
    through the inverse CDF of the masked probabilities. ``forced[i]`` replays
    a given token sequence instead, still checked against the mask.
    """
    batch = len(streams)
    max_length = masker.config.max_length
    uniforms = np.stack([s.generator().random(max_length) for s in streams]) if batch else np.empty((0, max_length))
    forced = list(forced or [])
    forced += [None] * (batch - len(forced))

    states = [masker.new_state() for _ in range(batch)]
    steps: List[List[StepRecord]] = [[] for _ in range(batch)]
    h, c = net.initial_hidden(batch)
    active = np.arange(batch)

    with torch.no_grad():
        for t in range(max_length):
            if active.size == 0:
                break
            parents = np.array([states[i].parent for i in active])
            siblings = np.array([states[i].sibling for i in active])
            masks = np.stack([masker.mask(states[i]) for i in active])

            rows = torch.from_numpy(active)
            obs = net.encode(torch.from_numpy(parents), torch.from_numpy(siblings))
            logits, (h_new, c_new) = policy_step(net, obs, (h[rows], c[rows]))
            h[rows], c[rows] = h_new, c_new
            logp_t, entropy_t = masked_distribution(logits, torch.from_numpy(masks))
            logp = logp_t.numpy()
            entropy = entropy_t.numpy()

            cumulative = np.cumsum(np.exp(logp), axis=1)
            draws = (cumulative <= uniforms[active, t][:, None]).sum(axis=1)

            still_active = []
            for row, i in enumerate(active):
                legal = masks[row]
                if forced[i] is not None:
                    if t >= len(forced[i]):
                        raise ConfigError(f"forced sequence {i} ends before the traversal is complete")
                    action = int(forced[i][t])
                    if not legal[action]:
                        raise ConfigError(f"forced token {masker.library.tokens[action].name} is illegal at step {t + 1}")
                else:
                    action = int(draws[row])
                    if action >= legal.size:
                        action = int(np.flatnonzero(legal)[-1])
                steps[i].append(StepRecord(
                    observation=(int(parents[row]), int(siblings[row])),
                    action=action,
                    log_prob=float(logp[row, action]),
                    dist_entropy=float(entropy[row]),
                    mask=legal,
                ))
                states[i].push(action)
                if not states[i].complete:
                    still_active.append(i)
            active = np.array(still_active, dtype=np.int64)

    if active.size:
        raise MalformedTraversalError(f"{active.size} trajectories exceeded max_length {max_length}")
    return [TrajectoryRecord(steps=steps[i], traversal=states[i].traversal()) for i in range(batch)]


def sample_trajectory(net: PolicyNetwork, masker: ActionMasker, rng: RngStream) -> TrajectoryRecord:
    return sample_batch(net, masker, [rng])[0]


# ===================== Re-scoring =====================

class Rescored(NamedTuple):
    log_probs: torch.Tensor  # (batch, T), zero past each trajectory's end
    entropies: torch.Tensor  # (batch, T), zero past each trajectory's end
    step_mask: torch.Tensor  # (batch, T) bool


def rescore(net: PolicyNetwork, trajectories: Sequence[TrajectoryRecord]) -> Rescored:
    """Forward pass that replays stored trajectories under their stored masks."""
    batch = len(trajectories)
    horizon = max(len(tr) for tr in trajectories)
    n_tokens = net.n_tokens

    parents = np.full((batch, horizon), EMPTY, dtype=np.int64)
    siblings = np.full((batch, horizon), EMPTY, dtype=np.int64)
    actions = np.zeros((batch, horizon), dtype=np.int64)
    masks = np.ones((batch, horizon, n_tokens), dtype=bool)
    step_mask = np.zeros((batch, horizon), dtype=bool)
    for i, trajectory in enumerate(trajectories):
        for t, step in enumerate(trajectory.steps):
            parents[i, t], siblings[i, t] = step.observation
            actions[i, t] = step.action
            masks[i, t] = step.mask
            step_mask[i, t] = True

    parents_t = torch.from_numpy(parents)
    siblings_t = torch.from_numpy(siblings)
    actions_t = torch.from_numpy(actions)
    masks_t = torch.from_numpy(masks)
    valid = torch.from_numpy(step_mask)

    hidden = net.initial_hidden(batch)
    log_probs, entropies = [], []
    for t in range(horizon):
        obs = net.encode(parents_t[:, t], siblings_t[:, t])
        logits, hidden = policy_step(net, obs, hidden)
        logp, entropy = masked_distribution(logits, masks_t[:, t])
        chosen = logp.gather(1, actions_t[:, t:t + 1]).squeeze(1)
        log_probs.append(torch.where(valid[:, t], chosen, torch.zeros_like(chosen)))
        entropies.append(torch.where(valid[:, t], entropy, torch.zeros_like(entropy)))

    return Rescored(torch.stack(log_probs, dim=1), torch.stack(entropies, dim=1), valid)
