import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dpm.model import CustomerHistory, ModelParams


def random_history(rng, T, K=1, L=1, purchase=None, lam=1.0, cid=0):
    """History with Poisson touches; ``purchase`` None draws it at random."""
    if purchase is None:
        purchase = bool(rng.random() < 0.5)
    y = np.zeros(T, dtype=int)
    y[-1] = int(purchase)
    return CustomerHistory(cid, rng.poisson(lam, (T, K)), rng.poisson(lam, (T, L)), y)


def random_params(rng, K=1, L=1):
    return ModelParams(rng.normal(-1, 1), rng.uniform(-0.9, 0.9), rng.normal(0, 0.5, K), rng.normal(0, 0.5, L))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
