from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from locverify.geo import load_default_zones
from locverify.netgen import generate_network, simulate_measurements
from locverify.propagation import PropagationModel, load_default_model
from locverify.schedule import build_schedule

settings.register_profile("repo", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def zones():
    return load_default_zones()


@pytest.fixture(scope="session")
def model():
    return load_default_model()


@pytest.fixture(scope="session")
def const_model():
    return PropagationModel.constant(100.0)


@pytest.fixture(scope="session")
def small_world(zones, model):
    """A 200-node honest world shared by read-only tests."""
    net = generate_network(200, zones, seed=11)
    sched = build_schedule(b"small-world-beacon", net.keys(), 20)
    ms = simulate_measurements(net, sched, model, seed=5)
    return net, sched, ms


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
