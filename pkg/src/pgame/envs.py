"""Desk-scale episodic control tasks with fitness and behaviour descriptors.

Every task has a deterministic twin: the uncertain variant differs only by a
Gaussian draw of the initial state, seeded by the episode seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import neuro


@dataclass(frozen=True)
class TaskSpec:
    name: str
    obs_dim: int
    act_dim: int
    horizon: int
    bd_dim: int
    bd_low: Tuple[float, ...]
    bd_high: Tuple[float, ...]
    uncertain: bool
    init_noise_sigma: float
    fitness_floor: float
    # True when reaching the horizon is a real end of the MDP (no bootstrap)
    terminal_at_horizon: bool = False

    def __post_init__(self):
        if self.horizon < 1 or self.bd_dim < 1:
            raise ValueError("horizon and bd_dim must be >= 1")
        if (self.init_noise_sigma > 0) != self.uncertain:
            raise ValueError("init_noise_sigma must be positive exactly when the task is uncertain")

    def normalize_bd(self, raw: np.ndarray) -> np.ndarray:
        low = np.asarray(self.bd_low)
        high = np.asarray(self.bd_high)
        return np.clip((raw - low) / (high - low), 0.0, 1.0)


@dataclass
class EvalResult:
    fitness: float
    bd: np.ndarray
    episode_seed: int
    # transitions as arrays: states (T, obs), actions (T, act), rewards (T,),
    # next_states (T, obs), terminals (T,); None when not collected
    transitions: Optional[Tuple[np.ndarray, ...]] = None

    @property
    def n_transitions(self) -> int:
        return 0 if self.transitions is None else len(self.transitions[2])


ARENA = 5.0
POINTNAV_SIGMA = 0.05
DIAG_TARGET = np.array([0.5, -0.25])


def task_pointnav(uncertain: bool = False) -> TaskSpec:
    """2-D point mass; BD is the final position, fitness is x-progress minus energy."""
    return TaskSpec(
        name="pointnav", obs_dim=4, act_dim=2, horizon=50, bd_dim=2,
        bd_low=(-ARENA, -ARENA), bd_high=(ARENA, ARENA),
        uncertain=bool(uncertain), init_noise_sigma=POINTNAV_SIGMA if uncertain else 0.0,
        fitness_floor=-10.0,
    )


def task_diag_onestep() -> TaskSpec:
    """One step from a zero observation; reward -||a - a*||^2 with a* = (0.5, -0.25)."""
    return TaskSpec(
        name="diag_onestep", obs_dim=2, act_dim=2, horizon=1, bd_dim=2,
        bd_low=(-1.0, -1.0), bd_high=(1.0, 1.0),
        uncertain=False, init_noise_sigma=0.0,
        fitness_floor=-4.0, terminal_at_horizon=True,
    )


def make_task(name: str, uncertain: bool = False) -> TaskSpec:
    if name == "pointnav":
        return task_pointnav(uncertain)
    if name == "diag_onestep":
        if uncertain:
            raise ValueError("diag_onestep has no uncertain variant")
        return task_diag_onestep()
    raise ValueError(f"unknown task {name!r}")


def initial_states(task: TaskSpec, seeds: Sequence[int]) -> np.ndarray:
    s = np.zeros((len(seeds), task.obs_dim))
    if task.uncertain:
        for i, seed in enumerate(seeds):
            s[i] = np.random.default_rng(int(seed)).normal(0.0, task.init_noise_sigma, size=task.obs_dim)
    return s


def step(task: TaskSpec, state: np.ndarray, action: np.ndarray):
    """Pure dynamics on a batch of states; returns (next_state, reward)."""
    action = np.clip(action, -1.0, 1.0)
    if task.name == "pointnav":
        pos, vel = state[:, :2], state[:, 2:]
        new_pos = np.clip(pos + 0.1 * vel, -ARENA, ARENA)
        new_vel = 0.9 * vel + 0.1 * action
        reward = (new_pos[:, 0] - pos[:, 0]) - 0.05 * np.sum(action * action, axis=1)
        return np.concatenate([new_pos, new_vel], axis=1), reward
    if task.name == "diag_onestep":
        d = action - DIAG_TARGET
        return state.copy(), -np.sum(d * d, axis=1)
    raise ValueError(f"unknown task {task.name!r}")


def raw_bd(task: TaskSpec, final_state: np.ndarray, last_action: np.ndarray) -> np.ndarray:
    if task.name == "pointnav":
        return final_state[:, :2]
    return np.clip(last_action, -1.0, 1.0)


def rollout(task: TaskSpec, policy, init: np.ndarray, seeds: Sequence[int],
            collect: bool = False, action_noise=None) -> List[EvalResult]:
    """Run len(init) episodes in lock-step.

    ``policy(states, t)`` maps a (K, obs) batch to (K, act) actions.
    ``action_noise(t)``, if given, returns a (K, act) perturbation added before clipping.
    """
    k = len(init)
    state = init.copy()
    fitness = np.zeros(k)
    alive = np.ones(k, dtype=bool)
    T = task.horizon
    if collect:
        S = np.zeros((T, k, task.obs_dim))
        A = np.zeros((T, k, task.act_dim))
        R = np.zeros((T, k))
        S2 = np.zeros((T, k, task.obs_dim))
    action = np.zeros((k, task.act_dim))
    steps = np.full(k, T)
    for t in range(T):
        action = policy(state, t)
        if action_noise is not None:
            action = action + action_noise(t)
        action = np.clip(action, -1.0, 1.0)
        nxt, reward = step(task, state, action)
        ok = np.all(np.isfinite(nxt), axis=1) & np.isfinite(reward)
        newly_dead = alive & ~ok
        if np.any(newly_dead):
            steps[newly_dead] = t
            alive &= ok
        fitness = np.where(alive, fitness + np.where(ok, reward, 0.0), fitness)
        if collect:
            S[t], A[t], R[t], S2[t] = state, action, reward, nxt
        state = np.where(alive[:, None], nxt, state)
    bd = task.normalize_bd(raw_bd(task, state, action))
    out = []
    for i in range(k):
        f = float(fitness[i]) if steps[i] == T else task.fitness_floor
        trans = None
        if collect:
            n = int(steps[i])
            term = np.zeros(n, dtype=bool)
            if n == T and task.terminal_at_horizon:
                term[-1] = True
            trans = (S[:n, i].copy(), A[:n, i].copy(), R[:n, i].copy(), S2[:n, i].copy(), term)
        out.append(EvalResult(f, bd[i].copy(), int(seeds[i]), trans))
    return out


def evaluate_many(task: TaskSpec, spec: neuro.MlpSpec, params_list: Sequence[np.ndarray],
                  seeds: Sequence[int], collect: bool = False) -> List[EvalResult]:
    """Evaluate several policies, one episode each, in a single vectorised rollout."""
    if len(params_list) != len(seeds):
        raise ValueError("one episode seed per policy is required")
    if not len(params_list):
        return []
    if spec.n_in != task.obs_dim or spec.n_out != task.act_dim:
        raise ValueError("policy network does not match the task's observation/action sizes")
    stack = np.stack([neuro.check_params(spec, p) for p in params_list])
    init = initial_states(task, seeds)
    return rollout(task, lambda s, t: neuro.forward_population(spec, stack, s), init, seeds, collect)


def evaluate(task: TaskSpec, spec: neuro.MlpSpec, params: np.ndarray, episode_seed: int,
             collect: bool = True) -> EvalResult:
    return evaluate_many(task, spec, [params], [episode_seed], collect)[0]
