import warnings

import numpy as np
import pytest

from gvecchia import MaternParams, NoiseModel, build_geometry


def random_geometry(n_obs, n_pred, dim=2, seed=0, ordering="maxmin"):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(size=(n_obs + n_pred, dim))
    obs = np.r_[np.ones(n_obs, bool), np.zeros(n_pred, bool)]
    return build_geometry(pts, obs, ordering)


@pytest.fixture
def geo30():
    return random_geometry(20, 10, seed=3)


@pytest.fixture
def model():
    return MaternParams(1.0, 0.2, 1.5), NoiseModel(0.1)


@pytest.fixture(autouse=True)
def _quiet_lf_auto_warning():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="lf-auto is intended")
        yield


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if not test_acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcomes in test_acceptance.RESULTS.items():
        for ok, detail in outcomes:
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
