import numpy as np
import pytest

from xdr.synth import Scenario, generate

# small enough for sub-second training, large enough for every split to be non-empty
SMALL = dict(
    source_users=80, source_items=60, target_users=80, target_items=60,
    source_density=0.1, target_density=0.1, target_keep=0.5,
    words_per_topic=10, generic_words=20, dim=8,
)


@pytest.fixture(scope="session")
def small_scenario():
    return Scenario(**SMALL)


@pytest.fixture(scope="session")
def small_domains(small_scenario):
    return generate(small_scenario, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
