import numpy as np
import pytest

from tabadv.features import compute_features, default_plan
from tabadv.synthdata import GeneratorConfig, generate


@pytest.fixture(scope="session")
def small_df():
    # ~4,500 rows: small enough for brute-force oracles
    return generate(GeneratorConfig(n_cards=400, n_merchants=30, weeks=6, seed=3))


@pytest.fixture(scope="session")
def plan():
    return default_plan()


@pytest.fixture(scope="session")
def small_enriched(small_df, plan):
    return compute_features(small_df, plan)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
