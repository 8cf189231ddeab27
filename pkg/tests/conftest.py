import warnings

import pytest

from mrt_integration.datamodel import ModeratorConfig
from mrt_integration.sim.generative import default_features, generate_combined

from helpers import ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(".")[0].split()[-1])):
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _quiet_weight_warnings():
    from mrt_integration.errors import ExtremeWeightsWarning, WeightClampWarning

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExtremeWeightsWarning)
        warnings.simplefilter("ignore", WeightClampWarning)
        yield


@pytest.fixture(scope="session")
def features():
    return default_features()


@pytest.fixture(scope="session")
def sim_config(features):
    F = features
    return ModeratorConfig(F["f_r"], F["f_s"], F["g"], F["d"])


@pytest.fixture(scope="session")
def small_sim():
    """One modest two-study dataset for smoke and identity tests."""
    return generate_combined(100, 100, 20, seed=123)
