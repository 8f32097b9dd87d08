import numpy as np
import pytest

from icrl import collect, data, envs


@pytest.fixture(scope="session")
def small_dataset():
    """Three short DR9 histories on distinct goals."""
    cfg = collect.QLearnConfig(n_episodes=12)
    hs = [collect.collect_history(envs.dark_room(9, g), cfg, s) for s, g in enumerate([(1, 2), (7, 0), (3, 8)])]
    return data.make_dataset("DR9-3-1", hs, [envs.dark_room(9, (0, 0)), envs.dark_room(9, (8, 8))], seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_batch(small_dataset):
    return data.sample_context_batch(small_dataset, 3, 8, seed=0)


def pytest_terminal_summary(terminalreporter):
    import helpers

    if helpers.ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(helpers.ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
