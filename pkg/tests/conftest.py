import dataclasses

import numpy as np
import pytest

from fedfraud import nn
from fedfraud.config import FederationConfig, TrainConfig, default_sites
from fedfraud.datagen import generate_federation


def small_federation(algorithm="fedavg", seed=0, n_sites=3, n_records=3000, rounds=3, **overrides):
    """A few small sites with every anomaly type present somewhere."""
    train_types = {"site-A": (1, 2), "site-B": (2, 3), "site-C": (3, 4), "site-D": (1, 4), "site-E": (1, 3)}
    keep = dict(list(train_types.items())[:n_sites])
    sites = default_sites(n_records=n_records, fraud_fraction=0.009, seed=seed, train_types=keep)
    kw = dict(sites=sites, algorithm=algorithm, rounds=rounds, seed=seed, train=TrainConfig(batch_size=128))
    kw.update(overrides)
    return FederationConfig(**kw)


@pytest.fixture(scope="session")
def small_config():
    return small_federation()


@pytest.fixture(scope="session")
def small_sites(small_config):
    return generate_federation(small_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_params(rng, input_dim=3, hidden=(4, 3), n_out=2, scale=1.0):
    """Small network with non-trivial LayerNorm gains/offsets and biases."""
    p = nn.init_model(input_dim, int(rng.integers(1 << 31)), hidden_sizes=hidden, n_out=n_out)
    return p.map(lambda v: v * scale + 0.1 * rng.standard_normal(v.shape))


def replace_train(config, **changes):
    return dataclasses.replace(config, train=dataclasses.replace(config.train, **changes))


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
