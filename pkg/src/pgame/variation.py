"""Offspring generators: directional GA, critic-guided PG, and the greedy copy."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from . import neuro
from .rl_core import CriticEnsemble, ReplayBuffer


@dataclass
class VariationConfig:
    sigma1: float = 0.005
    sigma2: float = 0.05
    n_act: int = 50
    lr_pg: float = 0.005
    pg_batch: int = 256
    proportion_ga: float = 0.5
    batch_size: int = 100

    def __post_init__(self):
        if self.sigma1 < 0 or self.sigma2 < 0:
            raise ValueError("sigma1 and sigma2 must be non-negative")
        if self.n_act < 0:
            raise ValueError("n_act must be non-negative")
        if not 0.0 <= self.proportion_ga <= 1.0:
            raise ValueError("proportion_ga must lie in [0, 1]")
        if self.batch_size < 1 or self.pg_batch < 1:
            raise ValueError("batch sizes must be positive")


def ga_directional(parent1: np.ndarray, parent2: np.ndarray, cfg: VariationConfig,
                   rng: np.random.Generator) -> np.ndarray:
    """parent1 + sigma1 * N(0, I) + sigma2 * (parent2 - parent1) * N(0, 1)."""
    if parent1.shape != parent2.shape:
        raise ValueError("parents have different lengths")
    z = rng.standard_normal(parent1.shape)
    u = rng.standard_normal()
    return parent1 + cfg.sigma1 * z + cfg.sigma2 * (parent2 - parent1) * u


def pg_variation_many(parents: Sequence[np.ndarray], ens: CriticEnsemble, buffer: ReplayBuffer,
                      cfg: VariationConfig, rng: np.random.Generator) -> List[np.ndarray]:
    """PG variation of several parents at once.

    Each child gets its own Adam state and its own state batches; the children
    are only stacked so that one matrix product serves all of them.
    """
    if len(buffer) == 0:
        raise RuntimeError("PG variation needs a non-empty replay buffer")
    if not len(parents):
        return []
    spec = ens.actor_spec
    children = np.stack([neuro.check_params(spec, p) for p in parents])
    k, n = len(children), cfg.pg_batch
    opt = neuro.AdamState.zeros(children.shape)
    for _ in range(cfg.n_act):
        states = buffer.sample_states((k, n), rng)
        actions, acts = neuro.forward_stacked(spec, children, states)
        dq_da = ens.q1_action_grad(states.reshape(k * n, -1), actions.reshape(k * n, -1))
        grad = neuro.backward_stacked(spec, children, acts, -dq_da.reshape(k, n, -1) / n)
        children = neuro.adam_step(opt, children, grad, cfg.lr_pg)
    return list(children)


def pg_variation(parent: np.ndarray, ens: CriticEnsemble, buffer: ReplayBuffer,
                 cfg: VariationConfig, rng: np.random.Generator) -> np.ndarray:
    """n_act Adam ascent steps on mean Q1(s, pi(s)), a fresh state batch per step."""
    return pg_variation_many([parent], ens, buffer, cfg, rng)[0]


def split_batch(cfg: VariationConfig) -> Tuple[int, int, int]:
    """(n_ga, n_pg, n_greedy); the greedy copy is counted inside the PG share."""
    b = cfg.batch_size
    n_ga = math.floor(cfg.proportion_ga * b)
    n_greedy = 1 if cfg.proportion_ga < 1.0 else 0
    n_greedy = min(n_greedy, b - n_ga)
    return n_ga, b - n_ga - n_greedy, n_greedy


def greedy_offspring(ens: CriticEnsemble) -> np.ndarray:
    return ens.greedy.copy()
