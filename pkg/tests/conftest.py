from __future__ import annotations

import numpy as np
import pytest

from trunccert.model import Payoff, RegimeModel, TruncatedDomain, validate_model

BS_REFERENCE = 10.450583572185565  # s = K = 100, r = 0.05, sigma = 0.2, T = 1


def single(r, sigma):
    return validate_model(RegimeModel(r=[r], sigma=[sigma], generator=[[0.0]]))


@pytest.fixture
def bs_model():
    return single(0.05, 0.2)


@pytest.fixture
def pos_gap_model():
    return single(0.01, 0.4)


@pytest.fixture
def neg_gap_model():
    return single(0.2, 0.1)


@pytest.fixture
def gap_domain():
    return TruncatedDomain([0.0], [20.0], 1.0)


@pytest.fixture
def two_regime():
    return validate_model(RegimeModel(r=[0.05, 0.02], sigma=[0.2, 0.4], generator=[[-1.0, 1.0], [1.0, -1.0]]))


@pytest.fixture
def call100():
    return Payoff("vanilla-call", 100.0)


def random_model(rng, d, k, rate_scale=1.0):
    """Random validated model with correlated lower-triangular vols."""
    sig = np.zeros((k, d, d))
    for i in range(k):
        low = np.tril(rng.uniform(-0.1, 0.1, (d, d)), -1)
        sig[i] = low + np.diag(rng.uniform(0.1, 0.5, d))
    lam = rng.uniform(0.0, rate_scale, (k, k))
    np.fill_diagonal(lam, 0.0)
    np.fill_diagonal(lam, -lam.sum(axis=1))
    return validate_model(RegimeModel(r=rng.uniform(0.0, 0.1, k), sigma=sig, generator=lam))


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda x: int(x.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
