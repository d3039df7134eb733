"""Session-scoped benchmark runs shared by the acceptance suite.

The default-configuration experiment is expensive relative to unit tests,
so it runs once per session and its records/states feed several criteria.
"""

import pytest

from madlab.config import apply_overrides, default_config, to_experiment
from madlab.trainer import run_experiment

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def run_benchmark(overrides=(), replicates=None):
    """Run the replicated experiment, capturing per-replicate states."""
    cfg = apply_overrides(default_config(), list(overrides))
    if replicates is not None:
        cfg = apply_overrides(cfg, [f"run.replicates={replicates}"])
    states = {}
    result = run_experiment(to_experiment(cfg),
                            on_replicate=lambda r, s: states.__setitem__(r, s))
    return result, states


@pytest.fixture(scope="session")
def benchmark_default():
    """Default config, 4 replicates: the desk benchmark."""
    return run_benchmark()


@pytest.fixture(scope="session")
def benchmark_untrained():
    """Same data protocol, no pretraining and no fine-tuning."""
    return run_benchmark(["pretrain.epochs=0", "finetune.epochs=0"])


@pytest.fixture(scope="session")
def benchmark_random_one_epoch():
    """Random initialization, exactly one fine-tune epoch."""
    return run_benchmark(["pretrain.epochs=0", "finetune.epochs=1"])


@pytest.fixture(scope="session")
def benchmark_unimodal_pair():
    """M=1 data under the uni-modal (N_s=1) and multi-modal configs."""
    uni, _ = run_benchmark(["data.modes=1", "finetune.n_s=1"], replicates=2)
    multi, _ = run_benchmark(["data.modes=1"], replicates=2)
    return uni, multi


@pytest.fixture(scope="session")
def benchmark_ratio_sweep(benchmark_default):
    """Labeled-ratio sweep; the 5% point reuses the default benchmark."""
    low, _ = run_benchmark(["data.labeled_ratio=0.025"], replicates=2)
    high, _ = run_benchmark(["data.labeled_ratio=0.10"], replicates=2)
    return low, benchmark_default[0], high
