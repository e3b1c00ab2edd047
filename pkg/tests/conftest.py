import numpy as np
import pytest

from drainsurrogate.benchnets import bench15, bench15_document, two_node_document
from drainsurrogate.datasets import generated
from drainsurrogate.net import build_network
from drainsurrogate.rain import GeneratorConfig


@pytest.fixture(scope="session")
def net2():
    return build_network(two_node_document())


@pytest.fixture(scope="session")
def bench():
    return bench15()


@pytest.fixture
def bench_doc():
    return bench15_document()


@pytest.fixture(scope="session")
def small_data(bench):
    """A few labelled bench15 events, enough for unit-level training checks."""
    return generated(bench, GeneratorConfig(n_events=4, mode="extreme", duration_range=(20, 90), seed=5), "unit")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    lines = sorted(value for outcome in ("passed", "failed") for rep in terminalreporter.stats.get(outcome, [])
                   if rep.when == "call" for key, value in rep.user_properties if key == "acceptance")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
