"""PGA-MAP-Elites and the baselines that share its components.

Randomness is split into independent streams derived from the run seed, so
that e.g. the episode seeds of replication i are the same whatever the
variation operators consume.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import envs, neuro
from .archive import AddOutcome, CvtArchive, DeepGridArchive, build_cvt
from .metrics import MetricSet, compute_metrics, stable_mean
from .rl_core import CriticEnsemble, ReplayBuffer, Td3Config, critic_update, greedy_actor_update, train_critics
from .variation import VariationConfig, ga_directional, greedy_offspring, pg_variation_many, split_batch

log = logging.getLogger(__name__)

ALGORITHMS = ("pga_map_elites", "map_elites", "map_elites_sampling", "deep_grid", "td3_passive")
OPERATORS = ("Init", "GA", "PG", "Greedy", "TD3")


@dataclass
class AlgoConfig:
    algorithm: str = "pga_map_elites"
    eval_budget: int = 1_000_000
    n_init_episodes: int = 500
    n_crit: int = 300
    samples_m: int = 10
    depth_d: int = 50
    n_centroids: int = 1024
    cvt_samples: int = 25_000
    cvt_seed: int = 0
    actor_hidden: Tuple[int, ...] = (128, 128)
    critic_hidden: Tuple[int, ...] = (256, 256)
    variation: VariationConfig = field(default_factory=VariationConfig)
    td3: Td3Config = field(default_factory=Td3Config)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        for name in ("eval_budget", "n_init_episodes", "n_crit", "samples_m", "depth_d",
                     "n_centroids", "cvt_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.eval_budget < self.n_init_episodes:
            raise ValueError("eval_budget must cover the random initialisation episodes")
        self.actor_hidden = tuple(self.actor_hidden)
        self.critic_hidden = tuple(self.critic_hidden)


@dataclass
class RunRecord:
    generation: int
    evaluations: int
    qd_score: float
    coverage: float
    max_fitness: float
    offspring: Dict[str, int]
    additions: Dict[str, int]


@dataclass
class RunResult:
    archive: Union[CvtArchive, DeepGridArchive]
    records: List[RunRecord]
    actor_spec: neuro.MlpSpec
    critic_log: List[Tuple[int, float]] = field(default_factory=list)
    ensemble: Optional[CriticEnsemble] = None

    def reported_archive(self) -> CvtArchive:
        if isinstance(self.archive, DeepGridArchive):
            return self.archive.reported()
        return self.archive

    @property
    def evaluations(self) -> int:
        return self.records[-1].evaluations if self.records else 0


STREAMS = ("init", "select", "episode", "pg", "train", "nets", "insert", "explore", "probe")


def make_streams(seed: int) -> Dict[str, np.random.Generator]:
    children = np.random.SeedSequence(int(seed)).spawn(len(STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(STREAMS, children)}


def record_operator_contribution(tags: Sequence[str], outcomes: Sequence[AddOutcome]) -> Dict[str, int]:
    """Per-operator count of offspring that created or improved a cell."""
    counts: Dict[str, int] = {}
    for tag, outcome in zip(tags, outcomes):
        counts.setdefault(tag, 0)
        if outcome in (AddOutcome.NEW_CELL, AddOutcome.IMPROVED):
            counts[tag] += 1
    return counts


def _episode_seeds(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, 2**63 - 1, size=n)


class _Loop:
    """State shared by the MAP-Elites style loops."""

    def __init__(self, cfg: AlgoConfig, task: envs.TaskSpec, seed: int, deep: bool = False):
        self.cfg = cfg
        self.task = task
        self.rng = make_streams(seed)
        self.actor_spec = neuro.actor_spec(task.obs_dim, task.act_dim, cfg.actor_hidden)
        centroids = build_cvt(task.bd_dim, cfg.n_centroids, cfg.cvt_samples, cfg.cvt_seed)
        self.archive = DeepGridArchive(centroids, cfg.depth_d) if deep else CvtArchive(centroids)
        self.evaluations = 0
        self.generation = 0
        self.records: List[RunRecord] = []

    @property
    def in_init_phase(self) -> bool:
        return self.generation == 0 or self.evaluations < self.cfg.n_init_episodes

    @property
    def done(self) -> bool:
        return self.evaluations >= self.cfg.eval_budget

    def random_genotypes(self) -> List[np.ndarray]:
        b = self.cfg.variation.batch_size
        return [neuro.init_params(self.actor_spec, self.rng["init"]) for _ in range(b)]

    def ga_offspring(self, n: int) -> List[np.ndarray]:
        rng = self.rng["select"]
        out = []
        for _ in range(n):
            if isinstance(self.archive, DeepGridArchive):
                p1, p2 = self.archive.select(2, rng)
            else:
                p1, p2 = self.archive.uniform_select(2, rng)
            out.append(ga_directional(p1, p2, self.cfg.variation, rng))
        return out

    def evaluate(self, genotypes: Sequence[np.ndarray], samples: int = 1, collect: bool = False):
        """Evaluate each genotype ``samples`` times; returns (fitness, bd, results) per genotype."""
        seeds = _episode_seeds(self.rng["episode"], len(genotypes) * samples)
        flat = [g for g in genotypes for _ in range(samples)]
        results = envs.evaluate_many(self.task, self.actor_spec, flat, seeds, collect=collect)
        self.evaluations += len(flat)
        out = []
        for i in range(len(genotypes)):
            chunk = results[i * samples:(i + 1) * samples]
            if samples == 1:
                out.append((chunk[0].fitness, chunk[0].bd, chunk))
            else:
                fit = float(stable_mean(np.array([r.fitness for r in chunk])))
                bd = stable_mean(np.stack([r.bd for r in chunk]))
                out.append((fit, bd, chunk))
        return out

    def insert(self, genotypes, evaluated, tags) -> List[AddOutcome]:
        outcomes = []
        base = self.evaluations - len(genotypes)
        for i, (g, (fit, bd, _)) in enumerate(zip(genotypes, evaluated)):
            if isinstance(self.archive, DeepGridArchive):
                outcomes.append(self.archive.add(g, fit, bd, self.rng["insert"], base + i))
            else:
                outcomes.append(self.archive.try_add(g, fit, bd, base + i))
        return outcomes

    def metrics(self) -> MetricSet:
        floor = self.task.fitness_floor
        if isinstance(self.archive, DeepGridArchive):
            if not len(self.archive):
                return MetricSet(0.0, 0.0, floor)
            scores = self.archive.cell_scores()
            return MetricSet(float(np.sum(scores - floor)), self.archive.coverage(), self.archive.max_fitness())
        return compute_metrics(self.archive, floor)

    def close_generation(self, tags, outcomes) -> RunRecord:
        m = self.metrics()
        offspring: Dict[str, int] = {}
        for t in tags:
            offspring[t] = offspring.get(t, 0) + 1
        rec = RunRecord(self.generation, self.evaluations, m.qd_score, m.coverage, m.max_fitness,
                        offspring, record_operator_contribution(tags, outcomes))
        self.records.append(rec)
        self.generation += 1
        return rec


def _elites_loop(cfg: AlgoConfig, task: envs.TaskSpec, seed: int, samples: int = 1,
                 deep: bool = False) -> RunResult:
    loop = _Loop(cfg, task, seed, deep=deep)
    b = cfg.variation.batch_size
    while not loop.done:
        if loop.in_init_phase:
            offspring, tags = loop.random_genotypes(), ["Init"] * b
        else:
            offspring, tags = loop.ga_offspring(b), ["GA"] * b
        evaluated = loop.evaluate(offspring, samples=samples)
        loop.close_generation(tags, loop.insert(offspring, evaluated, tags))
    return RunResult(loop.archive, loop.records, loop.actor_spec)


def run_map_elites(cfg: AlgoConfig, task: envs.TaskSpec, seed: int) -> RunResult:
    """CVT MAP-Elites with directional variation."""
    return _elites_loop(cfg, task, seed)


def run_map_elites_sampling(cfg: AlgoConfig, task: envs.TaskSpec, seed: int) -> RunResult:
    """MAP-Elites where every offspring is scored by the mean of M evaluations."""
    return _elites_loop(cfg, task, seed, samples=cfg.samples_m)


def run_deep_grid(cfg: AlgoConfig, task: envs.TaskSpec, seed: int) -> RunResult:
    return _elites_loop(cfg, task, seed, deep=True)


def run_pga(cfg: AlgoConfig, task: envs.TaskSpec, seed: int,
            on_generation: Optional[Callable[[RunRecord], None]] = None) -> RunResult:
    """PGA-MAP-Elites main loop."""
    loop = _Loop(cfg, task, seed)
    var, td3 = cfg.variation, cfg.td3
    critic = neuro.critic_spec(task.obs_dim, task.act_dim, cfg.critic_hidden)
    ens = CriticEnsemble.create(loop.actor_spec, critic, loop.rng["nets"])
    buffer = ReplayBuffer(task.obs_dim, task.act_dim, td3.buffer_capacity)
    critic_log: List[Tuple[int, float]] = []
    n_ga, n_pg, n_greedy = split_batch(var)
    while not loop.done:
        if loop.in_init_phase:
            offspring, tags = loop.random_genotypes(), ["Init"] * var.batch_size
        else:
            if n_pg + n_greedy:
                # nothing reads the critics when every offspring comes from GA
                train_critics(ens, buffer, td3, cfg.n_crit, loop.rng["train"], critic_log)
            offspring = loop.ga_offspring(n_ga)
            if n_pg:
                parents = loop.archive.uniform_select(n_pg, loop.rng["select"])
                offspring += pg_variation_many(parents, ens, buffer, var, loop.rng["pg"])
            offspring += [greedy_offspring(ens) for _ in range(n_greedy)]
            tags = ["GA"] * n_ga + ["PG"] * n_pg + ["Greedy"] * n_greedy
        evaluated = loop.evaluate(offspring, collect=True)
        for _, _, results in evaluated:
            for r in results:
                buffer.push_many(*r.transitions)
        rec = loop.close_generation(tags, loop.insert(offspring, evaluated, tags))
        if on_generation is not None:
            on_generation(rec)
    return RunResult(loop.archive, loop.records, loop.actor_spec, critic_log, ens)


def run_td3_passive(cfg: AlgoConfig, task: envs.TaskSpec, seed: int,
                    passive_archive: bool = True) -> RunResult:
    """TD3 trained per timestep; after each episode the actor is offered to an archive.

    Each training episode and each archive evaluation costs one evaluation.
    Archive probes draw their episode seeds from a dedicated stream, so
    ``passive_archive=False`` leaves the training trajectory untouched.
    """
    loop = _Loop(cfg, task, seed)
    td3 = cfg.td3
    critic = neuro.critic_spec(task.obs_dim, task.act_dim, cfg.critic_hidden)
    ens = CriticEnsemble.create(loop.actor_spec, critic, loop.rng["nets"])
    buffer = ReplayBuffer(task.obs_dim, task.act_dim, td3.buffer_capacity)
    explore = loop.rng["explore"]
    critic_log: List[Tuple[int, float]] = []
    timesteps = 0
    while not loop.done:
        seed_ep = int(_episode_seeds(loop.rng["episode"], 1)[0])
        state = envs.initial_states(task, [seed_ep])
        for t in range(task.horizon):
            if timesteps < td3.warmup_timesteps:
                action = explore.uniform(-1.0, 1.0, size=(1, task.act_dim))
            else:
                action = neuro.forward(ens.actor_spec, ens.greedy, state)
                if td3.exploration_sigma > 0:
                    action = action + td3.exploration_sigma * explore.standard_normal(action.shape)
                action = np.clip(action, -1.0, 1.0)
            nxt, reward = envs.step(task, state, action)
            terminal = t == task.horizon - 1 and task.terminal_at_horizon
            buffer.push_many(state, action, reward, nxt, np.array([terminal], dtype=float))
            state = nxt
            timesteps += 1
            if timesteps > td3.warmup_timesteps:
                critic_log.append((ens.step + 1, critic_update(ens, buffer, td3, loop.rng["train"])))
                greedy_actor_update(ens, buffer, td3, loop.rng["train"])
        loop.evaluations += 1
        tags: List[str] = []
        outcomes: List[AddOutcome] = []
        if passive_archive:
            probe = int(_episode_seeds(loop.rng["probe"], 1)[0])
            res = envs.evaluate(task, ens.actor_spec, ens.greedy, probe, collect=False)
            loop.evaluations += 1
            tags, outcomes = ["TD3"], [loop.archive.try_add(ens.greedy, res.fitness, res.bd, loop.evaluations - 1)]
        loop.close_generation(tags, outcomes)
    return RunResult(loop.archive, loop.records, loop.actor_spec, critic_log, ens)


RUNNERS = {
    "pga_map_elites": run_pga,
    "map_elites": run_map_elites,
    "map_elites_sampling": run_map_elites_sampling,
    "deep_grid": run_deep_grid,
    "td3_passive": run_td3_passive,
}


def run_algorithm(cfg: AlgoConfig, task: envs.TaskSpec, seed: int) -> RunResult:
    return RUNNERS[cfg.algorithm](cfg, task, seed)
