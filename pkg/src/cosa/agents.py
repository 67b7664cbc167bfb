"""Cooperative sentiment agents: per-modality deterministic policies that emit
per-frame fusion weights, a joint attention critic, replay memory and the
TD / policy-gradient losses with soft-updated target copies."""
from __future__ import annotations

import copy
import math
from collections import deque
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import MODALITIES
from .diffcore import ModuleSpec, build_mlp, check_finite, derive_seed, seeded_init_, zero_last_layer_

DEFAULT_GAMMA = 0.5
DEFAULT_ZETA = 0.01


def _others(m: str) -> tuple[str, str]:
    return tuple(o for o in MODALITIES if o != m)


class SentimentAgents(nn.Module):
    """Three policies sharing one differential transform ``F_t`` (affine + ReLU).

    Agent ``i`` sees ``[f_i, F_t(f_i - f_j), F_t(f_i - f_k)]`` frame by frame and
    maps it through ``3h -> hidden -> 1`` with a sigmoid.
    """

    def __init__(self, embed_dim: int = 128, hidden_dim: int = 128, seed: int = 0,
                 zero_init: bool = True):
        super().__init__()
        self.embed_dim = embed_dim
        self.diff = build_mlp(ModuleSpec((embed_dim, embed_dim), out_activation="relu"),
                              derive_seed(seed, "agents.diff"))
        self.actors = nn.ModuleDict({
            m: build_mlp(ModuleSpec((3 * embed_dim, hidden_dim, 1), out_activation="sigmoid"),
                         derive_seed(seed, f"agents.actor.{m}"))
            for m in MODALITIES
        })
        if zero_init:
            # every policy starts at sigmoid(0) = 0.5 on every frame
            for actor in self.actors.values():
                zero_last_layer_(actor)

    def forward(self, states: dict[str, torch.Tensor], active=MODALITIES) -> dict[str, torch.Tensor]:
        ref = states[MODALITIES[0]].shape
        for m in MODALITIES:
            if states[m].shape != ref:
                raise ValueError(f"state shapes disagree: {m} {tuple(states[m].shape)} vs {tuple(ref)}")
        # F_t is affine + ReLU, so project each modality once and combine:
        # F_t(f_i - f_j) = relu(A f_i - A f_j + b)
        layer = self.diff.last
        proj = {m: states[m] @ layer.weight.T for m in MODALITIES}
        actions = {}
        for m in MODALITIES:
            if m not in active:
                actions[m] = states[m].new_ones(states[m].shape[:2])
                continue
            j, k = _others(m)
            d_j = torch.relu(proj[m] - proj[j] + layer.bias)
            d_k = torch.relu(proj[m] - proj[k] + layer.bias)
            actions[m] = self.actors[m](torch.cat([states[m], d_j, d_k], dim=-1))[..., 0]
        return actions

    def differential(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return self.diff(a - b)


class JointCritic(nn.Module):
    """Q = F_c(sum_i f_i (+) w_i).

    Per frame the modality features and their weight are concatenated and summed
    over modalities; the resulting sequence goes through an input projection,
    LayerNorm, one single-head self-attention block and a feed-forward block
    (both residual), is mean-pooled over frames and mapped to a scalar.
    """

    def __init__(self, embed_dim: int = 128, model_dim: int = 64, ff_dim: int = 128, seed: int = 0):
        super().__init__()
        self.model_dim = model_dim
        self.inp = nn.Linear(embed_dim + 1, model_dim)
        self.norm = nn.LayerNorm(model_dim)
        self.q = nn.Linear(model_dim, model_dim)
        self.k = nn.Linear(model_dim, model_dim)
        self.v = nn.Linear(model_dim, model_dim)
        self.o = nn.Linear(model_dim, model_dim)
        self.ff = nn.Sequential(nn.Linear(model_dim, ff_dim), nn.ReLU(), nn.Linear(ff_dim, model_dim))
        self.out = nn.Linear(model_dim, 1)
        seeded_init_(self, derive_seed(seed, "critic"))

    def forward(self, states: dict[str, torch.Tensor], actions: dict[str, torch.Tensor]) -> torch.Tensor:
        z = sum(torch.cat([states[m], actions[m].unsqueeze(-1)], dim=-1) for m in MODALITIES)
        x = self.norm(self.inp(z))
        scores = self.q(x) @ self.k(x).transpose(1, 2) / math.sqrt(self.model_dim)
        x = x + self.o(torch.softmax(scores, dim=-1) @ self.v(x))
        x = x + self.ff(x)
        return check_finite(self.out(x.mean(dim=1))[:, 0], "critic output")


class ActorCritic(nn.Module):
    """Live policies and critic plus their target copies (hard-copied at init)."""

    def __init__(self, embed_dim: int = 128, actor_hidden: int = 128, critic_dim: int = 64,
                 critic_ff: int = 128, seed: int = 0):
        super().__init__()
        self.agents = SentimentAgents(embed_dim, actor_hidden, seed)
        self.critic = JointCritic(embed_dim, critic_dim, critic_ff, seed)
        self.target_agents = copy.deepcopy(self.agents)
        self.target_critic = copy.deepcopy(self.critic)
        for p in [*self.target_agents.parameters(), *self.target_critic.parameters()]:
            p.requires_grad_(False)

    def act(self, states, active=MODALITIES, target: bool = False):
        return (self.target_agents if target else self.agents)(states, active)

    def q_value(self, states, actions, target: bool = False):
        return (self.target_critic if target else self.critic)(states, actions)

    def soft_update(self, zeta: float = DEFAULT_ZETA) -> None:
        soft_update(self.agents, self.target_agents, zeta)
        soft_update(self.critic, self.target_critic, zeta)


def soft_update(live: nn.Module, target: nn.Module, zeta: float) -> None:
    """target <- zeta * live + (1 - zeta) * target, elementwise."""
    if not 0 < zeta <= 1:
        raise ValueError("zeta must lie in (0, 1]")
    live_p = dict(live.named_parameters())
    with torch.no_grad():
        for name, t in target.named_parameters():
            src = live_p[name]
            if src.shape != t.shape:
                raise ValueError(f"soft_update shape mismatch at {name}: {tuple(src.shape)} vs {tuple(t.shape)}")
            t.mul_(1 - zeta).add_(src, alpha=zeta)


def reward(pred: torch.Tensor, labels: torch.Tensor, task: str) -> torch.Tensor:
    """MSA: -|y' - y|. MER: softmax probability assigned to the true class."""
    if task == "msa":
        return -(pred - labels.to(pred.dtype)).abs()
    if task == "mer":
        labels = labels.long()
        if labels.min() < 0 or labels.max() >= pred.shape[-1]:
            raise ValueError(f"class index outside [0, {pred.shape[-1]})")
        return torch.softmax(pred, dim=-1).gather(1, labels[:, None])[:, 0]
    raise ValueError(f"unknown task {task!r}")


@dataclass
class ReplayRecord:
    states: dict[str, torch.Tensor]
    actions: dict[str, torch.Tensor]
    next_states: dict[str, torch.Tensor]
    reward: torch.Tensor
    active: tuple[str, ...] = MODALITIES

    def __post_init__(self):
        n, t = self.reward.shape[0], self.states[MODALITIES[0]].shape[1]
        for m in MODALITIES:
            if self.states[m].shape[:2] != (n, t) or self.next_states[m].shape != self.states[m].shape:
                raise ValueError(f"inconsistent state shapes for modality {m}")
            if self.actions[m].shape != (n, t):
                raise ValueError(f"action for {m} has shape {tuple(self.actions[m].shape)}, expected {(n, t)}")
        check_finite(self.reward, "replay reward")


class ReplayMemory:
    """Bounded FIFO of transitions; uniform sampling with replacement."""

    def __init__(self, capacity: int = 64, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._records: deque[ReplayRecord] = deque(maxlen=capacity)
        self._rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self._records)

    def __getitem__(self, i) -> ReplayRecord:
        return self._records[i]

    def push(self, record: ReplayRecord) -> None:
        self._records.append(record)

    def sample_indices(self, n: int, seed: int | None = None) -> np.ndarray:
        if n == 0:
            return np.empty(0, dtype=np.int64)
        if not self._records:
            raise IndexError("cannot sample from an empty replay memory")
        rng = self._rng if seed is None else np.random.default_rng(seed)
        return rng.integers(0, len(self._records), size=n)

    def sample(self, n: int, seed: int | None = None) -> list[ReplayRecord]:
        return [self._records[i] for i in self.sample_indices(n, seed)]


def td_targets(record: ReplayRecord, ac: ActorCritic, gamma: float = DEFAULT_GAMMA) -> torch.Tensor:
    """r + gamma * Q'(s', mu'(s')) with target policies and target critic; no gradient."""
    with torch.no_grad():
        next_actions = ac.act(record.next_states, record.active, target=True)
        q_next = ac.q_value(record.next_states, next_actions, target=True)
        return record.reward + gamma * q_next


def loss_critic(record: ReplayRecord, ac: ActorCritic, gamma: float = DEFAULT_GAMMA) -> torch.Tensor:
    """Mean squared TD error of the live critic on the stored (state, action)."""
    target = td_targets(record, ac, gamma)
    q = ac.q_value(record.states, record.actions)
    return check_finite(((q - target) ** 2).mean(), "L_critic")


def loss_actor(states: dict[str, torch.Tensor], ac: ActorCritic, active=MODALITIES) -> torch.Tensor:
    """-mean Q(s, mu(s)); the critic is frozen so only policies (and F_t) get gradients."""
    flags = [p.requires_grad for p in ac.critic.parameters()]
    for p in ac.critic.parameters():
        p.requires_grad_(False)
    try:
        q = ac.q_value(states, ac.act(states, active))
    finally:
        for p, flag in zip(ac.critic.parameters(), flags):
            p.requires_grad_(flag)
    return check_finite(-q.mean(), "L_actor")
