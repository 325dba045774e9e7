"""TD3 components: replay buffer, twin critics with targets, greedy actor."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Optional

import numpy as np

from . import neuro


class Transition(NamedTuple):
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool


class Batch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    def __len__(self):
        return len(self.rewards)


@dataclass
class Td3Config:
    gamma: float = 0.99
    tau: float = 0.005
    policy_delay: int = 2
    smoothing_sigma: float = 0.2
    smoothing_clip: float = 0.5
    exploration_sigma: float = 0.2
    batch_size: int = 256
    lr_critic: float = 3e-4
    lr_actor: float = 3e-4
    buffer_capacity: int = 1_000_000
    warmup_timesteps: int = 2500

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.smoothing_clip <= 0:
            raise ValueError("smoothing_clip must be positive")
        if self.policy_delay < 1 or self.batch_size < 1 or self.buffer_capacity < 1:
            raise ValueError("policy_delay, batch_size and buffer_capacity must be positive")


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions stored column-wise."""

    def __init__(self, obs_dim: int, act_dim: int, capacity: int = 1_000_000):
        self.capacity = int(capacity)
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.states = np.zeros((self.capacity, obs_dim))
        self.actions = np.zeros((self.capacity, act_dim))
        self.rewards = np.zeros(self.capacity)
        self.next_states = np.zeros((self.capacity, obs_dim))
        self.terminals = np.zeros(self.capacity)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def push(self, t: Transition) -> None:
        self.push_many(np.asarray(t.state)[None], np.asarray(t.action)[None], np.array([t.reward]),
                       np.asarray(t.next_state)[None], np.array([t.terminal]))

    def push_many(self, states, actions, rewards, next_states, terminals) -> None:
        n = len(rewards)
        if states.shape != (n, self.obs_dim) or actions.shape != (n, self.act_dim) \
                or next_states.shape != (n, self.obs_dim):
            raise ValueError("transition shapes do not match the buffer")
        if n > self.capacity:
            sl = slice(n - self.capacity, n)
            states, actions, rewards = states[sl], actions[sl], rewards[sl]
            next_states, terminals = next_states[sl], terminals[sl]
            n = self.capacity
        idx = (self.cursor + np.arange(n)) % self.capacity
        self.states[idx] = states
        self.actions[idx] = actions
        self.rewards[idx] = rewards
        self.next_states[idx] = next_states
        self.terminals[idx] = terminals
        self.cursor = int((self.cursor + n) % self.capacity)
        self.size = min(self.capacity, self.size + n)

    def _oldest_first(self) -> np.ndarray:
        start = self.cursor if self.size == self.capacity else 0
        return (start + np.arange(self.size)) % self.capacity

    def contents(self) -> List[Transition]:
        return [self.get(i) for i in self._oldest_first()]

    def get(self, i: int) -> Transition:
        return Transition(self.states[i].copy(), self.actions[i].copy(), float(self.rewards[i]),
                          self.next_states[i].copy(), bool(self.terminals[i]))

    def sample_states(self, shape, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise RuntimeError("cannot sample from an empty replay buffer")
        return self.states[rng.integers(0, self.size, size=shape)]

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise RuntimeError("cannot sample from an empty replay buffer")
        idx = rng.integers(0, self.size, size=n)
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx],
                     self.next_states[idx], self.terminals[idx])


def buffer_push(buffer: ReplayBuffer, transition: Transition) -> None:
    buffer.push(transition)


def buffer_sample(buffer: ReplayBuffer, n: int, rng: np.random.Generator) -> Batch:
    return buffer.sample(n, rng)


@dataclass
class CriticEnsemble:
    actor_spec: neuro.MlpSpec
    critic_spec: neuro.MlpSpec
    q1: np.ndarray
    q2: np.ndarray
    greedy: np.ndarray
    q1_target: np.ndarray = None
    q2_target: np.ndarray = None
    greedy_target: np.ndarray = None
    step: int = 0
    q1_opt: neuro.AdamState = None
    q2_opt: neuro.AdamState = None
    greedy_opt: neuro.AdamState = None

    def __post_init__(self):
        if self.q1_target is None:
            self.q1_target = self.q1.copy()
        if self.q2_target is None:
            self.q2_target = self.q2.copy()
        if self.greedy_target is None:
            self.greedy_target = self.greedy.copy()
        self.q1_opt = self.q1_opt or neuro.AdamState.zeros(self.critic_spec.n_params)
        self.q2_opt = self.q2_opt or neuro.AdamState.zeros(self.critic_spec.n_params)
        self.greedy_opt = self.greedy_opt or neuro.AdamState.zeros(self.actor_spec.n_params)

    @classmethod
    def create(cls, actor_spec: neuro.MlpSpec, critic_spec: neuro.MlpSpec,
               rng: np.random.Generator) -> "CriticEnsemble":
        q1 = neuro.init_params(critic_spec, rng)
        q2 = neuro.init_params(critic_spec, rng)
        greedy = neuro.init_params(actor_spec, rng)
        return cls(actor_spec, critic_spec, q1, q2, greedy)

    def q_values(self, params: np.ndarray, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        x = np.concatenate([states, actions], axis=1)
        y, _ = neuro.forward_cached(self.critic_spec, params, x)
        return y[:, 0]

    def q1_action_grad(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """d Q1(s, a) / d a, one row per sample."""
        x = np.concatenate([states, actions], axis=1)
        _, acts = neuro.forward_cached(self.critic_spec, self.q1, x)
        _, gin = neuro.backward_cached(self.critic_spec, self.q1, acts, np.ones((len(x), 1)))
        return gin[:, states.shape[1]:]


def soft_update(target: np.ndarray, online: np.ndarray, tau: float) -> np.ndarray:
    target = np.asarray(target, dtype=np.float64)
    online = np.asarray(online, dtype=np.float64)
    if target.shape != online.shape:
        raise ValueError("target and online parameter shapes differ")
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    if tau == 1.0:
        return online.copy()
    if tau == 0.0:
        return target.copy()
    return (1.0 - tau) * target + tau * online


def compute_target(ens: CriticEnsemble, batch: Batch, cfg: Td3Config,
                   rng: np.random.Generator) -> np.ndarray:
    """y = r + gamma * (1 - terminal) * min_i Q_i'(s', clip(pi'(s') + eps, -1, 1))."""
    a_next, _ = neuro.forward_cached(ens.actor_spec, ens.greedy_target, batch.next_states)
    noise = np.clip(cfg.smoothing_sigma * rng.standard_normal(a_next.shape),
                    -cfg.smoothing_clip, cfg.smoothing_clip)
    a_next = np.clip(a_next + noise, -1.0, 1.0)
    q1 = ens.q_values(ens.q1_target, batch.next_states, a_next)
    q2 = ens.q_values(ens.q2_target, batch.next_states, a_next)
    return batch.rewards + cfg.gamma * (1.0 - batch.terminals) * np.minimum(q1, q2)


def critic_update(ens: CriticEnsemble, buffer: ReplayBuffer, cfg: Td3Config,
                  rng: np.random.Generator) -> float:
    """One Adam step on both critics; returns the pre-step loss."""
    batch = buffer.sample(cfg.batch_size, rng)
    y = compute_target(ens, batch, cfg, rng)
    x = np.concatenate([batch.states, batch.actions], axis=1)
    n = len(y)
    loss = 0.0
    for name in ("q1", "q2"):
        params = getattr(ens, name)
        q, acts = neuro.forward_cached(ens.critic_spec, params, x)
        err = y - q[:, 0]
        loss += float(np.mean(err * err))
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite critic loss at step {ens.step}")
        grad, _ = neuro.backward_cached(ens.critic_spec, params, acts, (-2.0 / n) * err[:, None])
        setattr(ens, name, neuro.adam_step(getattr(ens, f"{name}_opt"), params, grad, cfg.lr_critic))
    ens.step += 1
    return loss


def actor_ascent_grad(ens: CriticEnsemble, spec: neuro.MlpSpec, params: np.ndarray,
                      states: np.ndarray) -> np.ndarray:
    """Gradient of -mean Q1(s, pi(s)) with respect to the actor parameters."""
    a, acts = neuro.forward_cached(spec, params, states)
    dq_da = ens.q1_action_grad(states, a)
    grad, _ = neuro.backward_cached(spec, params, acts, -dq_da / len(states))
    return grad


def greedy_actor_update(ens: CriticEnsemble, buffer: ReplayBuffer, cfg: Td3Config,
                        rng: np.random.Generator) -> bool:
    """Delayed policy step plus target soft-updates; True when an update happened."""
    if ens.step % cfg.policy_delay != 0:
        return False
    batch = buffer.sample(cfg.batch_size, rng)
    grad = actor_ascent_grad(ens, ens.actor_spec, ens.greedy, batch.states)
    ens.greedy = neuro.adam_step(ens.greedy_opt, ens.greedy, grad, cfg.lr_actor)
    ens.q1_target = soft_update(ens.q1_target, ens.q1, cfg.tau)
    ens.q2_target = soft_update(ens.q2_target, ens.q2, cfg.tau)
    ens.greedy_target = soft_update(ens.greedy_target, ens.greedy, cfg.tau)
    return True


def train_critics(ens: CriticEnsemble, buffer: ReplayBuffer, cfg: Td3Config, n_steps: int,
                  rng: np.random.Generator, log: Optional[list] = None) -> None:
    """n_steps iterations of critic_update followed by the delayed greedy update."""
    for _ in range(n_steps):
        loss = critic_update(ens, buffer, cfg, rng)
        if log is not None:
            log.append((ens.step, loss))
        greedy_actor_update(ens, buffer, cfg, rng)
