import numpy as np
import pytest
from hypothesis import settings

from hidra.episodes import SyntheticSpec, gen_synthetic, sample_episode

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_pool():
    return gen_synthetic(SyntheticSpec(feature_dim=6, n_classes=12, instances_per_class=30, cluster_std=0.5, seed=3))


@pytest.fixture
def episode(small_pool):
    return sample_episode(small_pool, 3, 4, 5, seed=11)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import VERDICTS
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(VERDICTS, key=lambda k: int(k.split("-")[1])):
            terminalreporter.write_line(VERDICTS[key])
