import warnings

import numpy as np
import pytest

from magbloch.problem import CoefficientSpec, build_problem
from magbloch.presets import asymmetric_control, symmetric_suite


@pytest.fixture(autouse=True)
def _quiet_lobpcg():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        yield


@pytest.fixture(scope="session")
def free():
    return build_problem(CoefficientSpec("free"))


@pytest.fixture(scope="session")
def landau():
    return build_problem(CoefficientSpec("landau", flux_integer=1))


@pytest.fixture(scope="session")
def suite():
    return {name: build_problem(spec) for name, spec in symmetric_suite().items()}


@pytest.fixture(scope="session")
def asymmetric():
    return build_problem(asymmetric_control())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one summary line per acceptance criterion."""
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
