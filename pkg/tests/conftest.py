import dataclasses

import pytest

from pgame.qd_loop import AlgoConfig
from pgame.rl_core import Td3Config
from pgame.variation import VariationConfig


def tiny_config(algorithm="pga_map_elites", budget=400, proportion=0.5, **kw):
    """A seconds-scale configuration for loop-level tests."""
    var = VariationConfig(batch_size=20, n_act=3, pg_batch=16, proportion_ga=proportion)
    td3 = Td3Config(batch_size=16, warmup_timesteps=100)
    base = AlgoConfig(algorithm=algorithm, eval_budget=budget, n_init_episodes=40, n_crit=4,
                      samples_m=3, depth_d=4, n_centroids=32, cvt_samples=1000,
                      actor_hidden=(6,), critic_hidden=(8,), variation=var, td3=td3)
    if algorithm == "td3_passive":
        # per-timestep training: a few episodes already mean hundreds of updates
        base = dataclasses.replace(base, eval_budget=min(budget, 20), n_init_episodes=1)
    return dataclasses.replace(base, **kw)


@pytest.fixture
def tiny():
    return tiny_config


# Acceptance criteria report: one line per criterion, printed after the run.
ACCEPTANCE_LINES = []


def record_criterion(number, title, ok, detail=""):
    ACCEPTANCE_LINES.append((number, title, bool(ok), detail))
    print(f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}")
