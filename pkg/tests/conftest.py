import pytest

from fedslate.config import ExperimentConfig

ACCEPTANCE_LINES = []


def small_config(**changes):
    """A fast configuration for plumbing tests."""
    base = {
        "episodes": 6, "batch_size": 8, "buffer_capacity": 500, "learn_every": 2,
        "env.num_candidates": 6, "env.slate_size": 2, "env.budget": 8.0,
        "nets.local_hidden": [8, 8, 8, 8, 8], "nets.global_hidden": [8, 8, 8, 8, 4],
        "nets.ablated_hidden": [8],
    }
    base.update(changes)
    return ExperimentConfig().replace(**base)


@pytest.fixture
def small():
    return small_config


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
