"""QD metrics, corrected archives, reproducibility losses and significance tests."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy.stats import norm, rankdata

from . import envs, neuro
from .archive import CvtArchive


@dataclass
class MetricSet:
    qd_score: float
    coverage: float
    max_fitness: float


@dataclass
class CorrectedReport:
    original: MetricSet
    corrected: MetricSet
    qd_score_loss: float
    max_fitness_loss: float
    coverage_loss: float
    n_reeval: int


def compute_metrics(archive: CvtArchive, offset_floor: float) -> MetricSet:
    if not len(archive):
        return MetricSet(0.0, 0.0, float(offset_floor))
    fit = archive.fitnesses()
    return MetricSet(float(np.sum(fit - offset_floor)), archive.coverage(), float(np.max(fit)))


def stable_mean(values: np.ndarray, axis: int = 0) -> np.ndarray:
    """Mean computed around the first sample: exact when all samples are equal."""
    values = np.asarray(values, dtype=np.float64)
    first = np.take(values, [0], axis=axis)
    return np.squeeze(first, axis=axis) + np.mean(values - first, axis=axis)


def reevaluate(task: envs.TaskSpec, spec: neuro.MlpSpec, genotype: np.ndarray,
               seeds: Sequence[int]) -> Tuple[float, np.ndarray]:
    """(mean fitness, mean BD) over one episode per seed."""
    results = envs.evaluate_many(task, spec, [genotype] * len(seeds), seeds)
    fit = stable_mean(np.array([r.fitness for r in results]))
    bd = stable_mean(np.stack([r.bd for r in results]))
    return float(fit), bd


def build_corrected_archive(archive: CvtArchive, task: envs.TaskSpec, spec: neuro.MlpSpec,
                            n_reeval: int = 50, seed: int = 0) -> CvtArchive:
    """Re-insert every elite at its mean fitness/BD over ``n_reeval`` fresh episodes.

    Uses the same centroids and addition rule; elites are offered in descending
    original fitness (cell index breaks ties). The input archive is not modified.
    """
    if n_reeval < 1:
        raise ValueError("n_reeval must be >= 1")
    rng = np.random.default_rng(seed)
    order = sorted(archive.cells.items(), key=lambda kv: (-kv[1].fitness, kv[0]))
    estimates = []
    for _, elite in order:
        seeds = rng.integers(0, 2**63 - 1, size=n_reeval)
        estimates.append((elite, *reevaluate(task, spec, elite.genotype, seeds)))
    corrected = CvtArchive(archive.centroids)
    for elite, fit, bd in estimates:
        corrected.try_add(elite.genotype, fit, bd, elite.eval_record_id)
    return corrected


def _loss(orig: float, corr: float) -> float:
    if orig == 0:
        return 0.0
    return (orig - corr) / orig


def compute_losses(original: MetricSet, corrected: MetricSet) -> Tuple[float, float, float]:
    """Normalised drop (original - corrected) / original for QD-score, max-fitness, coverage."""
    return (_loss(original.qd_score, corrected.qd_score),
            _loss(original.max_fitness, corrected.max_fitness),
            _loss(original.coverage, corrected.coverage))


def corrected_report(archive: CvtArchive, task: envs.TaskSpec, spec: neuro.MlpSpec,
                     n_reeval: int = 50, seed: int = 0) -> CorrectedReport:
    corrected = build_corrected_archive(archive, task, spec, n_reeval, seed)
    orig = compute_metrics(archive, task.fitness_floor)
    corr = compute_metrics(corrected, task.fitness_floor)
    qd, mx, cov = compute_losses(orig, corr)
    return CorrectedReport(orig, corr, qd, mx, cov, n_reeval)


# Wilcoxon rank-sum ---------------------------------------------------------

def _rank_sum_counts(n_a: int, n: int) -> np.ndarray:
    """counts[w] = number of n_a-subsets of ranks 1..n whose rank sum is w."""
    max_w = n_a * (2 * n - n_a + 1) // 2
    # table[j][w]: subsets of size j among the ranks seen so far
    table = [np.zeros(max_w + 1, dtype=np.int64) for _ in range(n_a + 1)]
    table[0][0] = 1
    for r in range(1, n + 1):
        for j in range(min(r, n_a), 0, -1):
            table[j][r:] = table[j][r:] + table[j - 1][:max_w + 1 - r]
    return table[n_a]


def _exact_p(w: float, n_a: int, n_b: int, alternative: str) -> float:
    total = math.comb(n_a + n_b, n_a)
    if total >= 2**62:
        raise ValueError("samples too large for exact enumeration; use method='normal'")
    counts = _rank_sum_counts(n_a, n_a + n_b)
    wi = int(round(w))
    lower = int(counts[: wi + 1].sum()) / total
    upper = int(counts[wi:].sum()) / total
    if alternative == "greater":
        return float(upper)
    if alternative == "less":
        return float(lower)
    return float(min(1.0, 2.0 * min(lower, upper)))


def _normal_p(w: float, ranks: np.ndarray, n_a: int, n_b: int, alternative: str) -> float:
    n = n_a + n_b
    mean = n_a * (n + 1) / 2.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float(np.sum(tie_counts ** 3 - tie_counts)) / (n * (n - 1)) if n > 1 else 0.0
    var = n_a * n_b / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return 1.0
    sd = math.sqrt(var)
    if alternative == "greater":
        return float(norm.sf((w - mean - 0.5) / sd))
    if alternative == "less":
        return float(norm.cdf((w - mean + 0.5) / sd))
    z = (abs(w - mean) - 0.5) / sd
    return float(min(1.0, 2.0 * norm.sf(max(z, 0.0))))


def wilcoxon_rank_sum(sample_a, sample_b, alternative: str = "two-sided", method: str = "auto") -> float:
    """Rank-sum p-value for sample_a versus sample_b.

    ``alternative="greater"`` tests whether sample_a tends to be larger.
    ``method="auto"`` counts the exact null distribution when the pooled size is
    at most 20 without ties, and uses the tie- and continuity-corrected normal
    approximation otherwise.
    """
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    if not len(a) or not len(b):
        raise ValueError("both samples must be non-empty")
    if alternative not in ("two-sided", "greater", "less"):
        raise ValueError(f"unknown alternative {alternative!r}")
    pooled = np.concatenate([a, b])
    if np.all(pooled == pooled[0]):
        return 1.0
    ranks = rankdata(pooled)
    w = float(np.sum(ranks[: len(a)]))
    has_ties = len(np.unique(pooled)) < len(pooled)
    if method == "auto":
        method = "exact" if len(pooled) <= 20 and not has_ties else "normal"
    if method == "exact":
        if has_ties:
            raise ValueError("the exact path requires tie-free samples")
        return _exact_p(w, len(a), len(b), alternative)
    if method == "normal":
        return _normal_p(w, ranks, len(a), len(b), alternative)
    raise ValueError(f"unknown method {method!r}")


def bonferroni(p_values: Sequence[float], k: int) -> List[float]:
    if k < len(p_values):
        raise ValueError("k must be at least the number of comparisons")
    return [min(1.0, p * k) for p in p_values]
