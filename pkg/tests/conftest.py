"""Shared fixtures: bundled sample networks and their nominal operating points."""
from importlib.resources import files

import numpy as np
import pytest

from gaspirn.ingest import load_network
from gaspirn.network import network_theta
from gaspirn.simulator import control_vector, nominal_network

DATA = files("gaspirn") / "data"

BASE_3NODE = {"1": 1.0e6, "2": 0.0, "3": -5.0}
BASE_11 = {"S1": 1.0e6, "S2": 1.0e6, "S3": 0.95e6, "T1": -4.0, "T2": -3.0, "T3": -4.0,
           "C1": 0.05e6, "C2": 0.08e6}
BASE_24 = {"S1": 1.0e6, "S2": 1.0e6, "S3": 0.95e6, "C1": 0.04e6, "C2": 0.04e6, "C3": 0.06e6,
           **{f"T{k}": -2.0 for k in range(1, 7)}}


def data_path(name: str) -> str:
    return str(DATA / name)


def boundary(net, values):
    full = {n: 0.0 for n in net.node_ids}
    full.update(values)
    return control_vector(net, full)


@pytest.fixture(scope="session")
def three_node():
    return load_network(data_path("three_node.json"))


@pytest.fixture(scope="session")
def three_node_nominal(three_node):
    return nominal_network(three_node, boundary(three_node, BASE_3NODE))


@pytest.fixture(scope="session")
def gaslib11():
    return load_network(data_path("gaslib11.json"))


@pytest.fixture(scope="session")
def gaslib11_nominal(gaslib11):
    return nominal_network(gaslib11, boundary(gaslib11, BASE_11))


@pytest.fixture(scope="session")
def gaslib24():
    return load_network(data_path("gaslib24.json"))


@pytest.fixture(scope="session")
def gaslib24_nominal(gaslib24):
    return nominal_network(gaslib24, boundary(gaslib24, BASE_24))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def theta_3node(three_node_nominal):
    return network_theta(three_node_nominal)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
