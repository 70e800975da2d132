import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from fedhal.data import DomainDataset  # noqa: E402
from fedhal.model import init_params  # noqa: E402
from fedhal.numerics import Rng  # noqa: E402

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# Acceptance tests append their verdict lines here; they are echoed in the
# terminal summary so the report survives output capturing.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return Rng(12345)


@pytest.fixture
def small_params():
    return init_params(Rng(7), input_dim=5, hidden_dim=6, feature_dim=4)


def make_dataset(n_ids=4, per_id=6, dim=5, seed=0, domain_id=0, offset=0):
    r = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_ids), per_id)
    protos = r.normal(size=(n_ids, dim)) * 3
    samples = protos[labels] + r.normal(size=(labels.size, dim))
    return DomainDataset(samples, labels, domain_id, n_ids, offset)
