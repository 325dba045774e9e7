import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import mannwhitneyu

from pgame import envs, metrics, neuro
from pgame.archive import CvtArchive, Elite, build_cvt


def brute_force_p(a, b, alternative="two-sided"):
    """Enumerate every assignment of the pooled ranks to the first sample."""
    pooled = sorted(list(a) + list(b))
    rank = {v: i + 1 for i, v in enumerate(pooled)}
    w = sum(rank[v] for v in a)
    n = len(pooled)
    sums = [sum(c) for c in itertools.combinations(range(1, n + 1), len(a))]
    lower = sum(s <= w for s in sums) / len(sums)
    upper = sum(s >= w for s in sums) / len(sums)
    if alternative == "greater":
        return upper
    if alternative == "less":
        return lower
    return min(1.0, 2 * min(lower, upper))


def archive_with(fits, n_cells=8):
    a = CvtArchive(np.linspace(0, 1, n_cells)[:, None])
    for i, f in enumerate(fits):
        a.cells[i] = Elite(np.zeros(1), f, a.centroids[i])
    return a


def test_compute_metrics_examples():
    m = metrics.compute_metrics(archive_with([5.0, 3.0]), 0.0)
    assert (m.qd_score, m.max_fitness, m.coverage) == (8.0, 5.0, 0.25)
    assert metrics.compute_metrics(archive_with([-2.0, -1.0]), -10.0).qd_score == 17.0
    e = metrics.compute_metrics(archive_with([]), -10.0)
    assert (e.qd_score, e.coverage, e.max_fitness) == (0.0, 0.0, -10.0)


def test_losses():
    m = metrics.MetricSet(100.0, 0.5, 2.0)
    assert metrics.compute_losses(m, m) == (0.0, 0.0, 0.0)
    qd, mx, cov = metrics.compute_losses(m, metrics.MetricSet(80.0, 0.25, 3.0))
    assert qd == pytest.approx(0.2) and cov == 0.5 and mx == -0.5
    assert metrics.compute_losses(metrics.MetricSet(0.0, 0.0, 0.0), m) == (0.0, 0.0, 0.0)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30))
def test_stable_mean_is_exact_for_constant_samples(values):
    v = np.full(len(values), values[0])
    assert metrics.stable_mean(v) == values[0]
    assert metrics.stable_mean(np.array(values)) == pytest.approx(np.mean(values), abs=1e-6)


def test_corrected_archive_on_deterministic_task_is_identical():
    task = envs.task_pointnav(False)
    spec = neuro.actor_spec(4, 2, (8,))
    a = CvtArchive(build_cvt(2, 32, 1000))
    rng = np.random.default_rng(0)
    for i in range(40):
        p = neuro.init_params(spec, rng) * 3
        r = envs.evaluate(task, spec, p, i, collect=False)
        a.try_add(p, r.fitness, r.bd, i)
    c = metrics.build_corrected_archive(a, task, spec, 50, seed=1)
    assert sorted(c.cells) == sorted(a.cells)
    for k in a.cells:
        assert c.cells[k].fitness == a.cells[k].fitness
        assert c.cells[k].bd.tobytes() == a.cells[k].bd.tobytes()
    rep = metrics.corrected_report(a, task, spec, 50, 1)
    assert (rep.qd_score_loss, rep.max_fitness_loss, rep.coverage_loss) == (0.0, 0.0, 0.0)


def test_single_elite_corrected_fitness_is_monte_carlo_mean():
    task = envs.task_pointnav(True)
    spec = neuro.actor_spec(4, 2, (8,))
    p = neuro.init_params(spec, np.random.default_rng(3)) * 2
    a = CvtArchive(build_cvt(2, 16, 500))
    r = envs.evaluate(task, spec, p, 123, collect=False)
    a.try_add(p, r.fitness, r.bd)
    snapshot = (a.cells[a.occupied()[0]].fitness, len(a))
    c = metrics.build_corrected_archive(a, task, spec, 50, seed=9)
    seeds = np.random.default_rng(9).integers(0, 2**63 - 1, size=50)
    fits = [envs.evaluate(task, spec, p, int(s), collect=False).fitness for s in seeds]
    (elite,) = list(c.cells.values())
    assert elite.fitness == pytest.approx(np.mean(fits), rel=1e-12)
    # the input archive is untouched
    assert (a.cells[a.occupied()[0]].fitness, len(a)) == snapshot


def test_migrating_elite_is_dropped(monkeypatch):
    a = CvtArchive(np.array([[0.25], [0.75]]))
    a.cells[0] = Elite(np.array([0.0]), 10.0, np.array([0.2]))
    a.cells[1] = Elite(np.array([1.0]), 1.0, np.array([0.8]))

    def fake_reeval(task, spec, genotype, seeds):
        # the weaker elite's true BD lies in the stronger elite's cell
        return (10.0, np.array([0.2])) if genotype[0] == 0 else (1.0, np.array([0.3]))

    monkeypatch.setattr(metrics, "reevaluate", fake_reeval)
    c = metrics.build_corrected_archive(a, None, None, 5)
    assert list(c.cells) == [0]
    orig, corr = metrics.compute_metrics(a, 0.0), metrics.compute_metrics(c, 0.0)
    assert metrics.compute_losses(orig, corr)[2] == 0.5


def test_build_corrected_archive_rejects_zero_reevals():
    with pytest.raises(ValueError):
        metrics.build_corrected_archive(archive_with([1.0]), None, None, 0)


def test_wilcoxon_known_value():
    assert metrics.wilcoxon_rank_sum([1, 2, 3], [10, 11, 12]) == pytest.approx(0.1, abs=1e-15)
    assert brute_force_p([1, 2, 3], [10, 11, 12]) == pytest.approx(0.1)
    assert metrics.wilcoxon_rank_sum([1, 2, 3], [10, 11, 12], alternative="less") == pytest.approx(0.05)
    assert metrics.wilcoxon_rank_sum([1, 2, 3], [10, 11, 12], alternative="greater") == pytest.approx(1.0)


def test_wilcoxon_degenerate_and_errors():
    assert metrics.wilcoxon_rank_sum([2, 2, 2], [2, 2]) == 1.0
    with pytest.raises(ValueError):
        metrics.wilcoxon_rank_sum([], [1])
    with pytest.raises(ValueError):
        metrics.wilcoxon_rank_sum([1], [2], alternative="bigger")
    with pytest.raises(ValueError):
        metrics.wilcoxon_rank_sum([1, 1], [2], method="exact")


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.integers(0, 10**6),
       st.sampled_from(["two-sided", "greater", "less"]))
def test_exact_path_matches_enumeration(n_a, n_b, seed, alt):
    rng = np.random.default_rng(seed)
    pooled = rng.permutation(n_a + n_b) + rng.uniform(0, 0.5)
    a, b = pooled[:n_a], pooled[n_a:]
    assert metrics.wilcoxon_rank_sum(a, b, alt, method="exact") == pytest.approx(brute_force_p(a, b, alt), abs=1e-12)


def test_rank_sum_counts_total():
    for n_a, n in [(3, 6), (5, 12), (10, 20)]:
        assert int(metrics._rank_sum_counts(n_a, n).sum()) == math.comb(n, n_a)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=3, max_size=15), st.lists(st.integers(0, 6), min_size=3, max_size=15))
def test_normal_path_matches_scipy_with_ties(a, b):
    if len(set(a + b)) == 1:
        return
    ours = metrics.wilcoxon_rank_sum(a, b, method="normal")
    ref = mannwhitneyu(a, b, alternative="two-sided", method="asymptotic", use_continuity=True).pvalue
    assert ours == pytest.approx(ref, abs=1e-12)
    for alt in ("greater", "less"):
        ours = metrics.wilcoxon_rank_sum(a, b, alternative=alt, method="normal")
        ref = mannwhitneyu(a, b, alternative=alt, method="asymptotic", use_continuity=True).pvalue
        assert ours == pytest.approx(ref, abs=1e-12)


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=12), st.lists(st.floats(-100, 100), min_size=1, max_size=12))
def test_wilcoxon_two_sided_symmetry(a, b):
    assert metrics.wilcoxon_rank_sum(a, b) == pytest.approx(metrics.wilcoxon_rank_sum(b, a), abs=1e-12)


def test_disjoint_samples_of_twenty():
    a, b = np.arange(20.0), np.arange(20.0) + 100
    p = metrics.wilcoxon_rank_sum(a, b)
    assert p < 1e-6
    # permutation oracle: no random relabelling reaches a rank sum this extreme
    rng = np.random.default_rng(0)
    pooled = np.concatenate([a, b])
    w = 210
    hits = sum(np.argsort(np.argsort(rng.permutation(pooled)))[:20].sum() + 20 <= w for _ in range(20_000))
    assert hits == 0
    assert metrics.wilcoxon_rank_sum(a, b, method="exact") == pytest.approx(2 / math.comb(40, 20))


def test_exact_and_normal_agree_on_moderate_samples():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        n_a, n_b = rng.integers(8, 11, size=2)
        x = rng.normal(size=n_a + n_b)
        a, b = x[:n_a] + rng.uniform(0, 1), x[n_a:]
        worst = max(worst, abs(metrics.wilcoxon_rank_sum(a, b, method="exact")
                               - metrics.wilcoxon_rank_sum(a, b, method="normal")))
    assert worst < 0.02


def test_bonferroni():
    assert metrics.bonferroni([0.01], 4) == [pytest.approx(0.04)]
    assert metrics.bonferroni([0.5], 4) == [1.0]
    assert metrics.bonferroni([0.3, 0.02], 2) == [0.6, 0.04]
    assert metrics.bonferroni([0.3], 1) == [0.3]
    with pytest.raises(ValueError):
        metrics.bonferroni([0.1, 0.2], 1)
