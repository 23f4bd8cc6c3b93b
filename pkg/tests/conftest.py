import numpy as np
import pytest

from chipoct.constants import GAUSS
from chipoct.dynamics import tf_ground_state
from chipoct.ramp import B_FINAL, B_INITIAL, sta_ramp
from chipoct.trap import ChipGeometry, build_trap_map

MAP_RANGE = (3.5 * GAUSS, 23.0 * GAUSS)


@pytest.fixture(scope="session")
def geometry():
    return ChipGeometry()


@pytest.fixture(scope="session")
def trap_map(geometry):
    return build_trap_map(geometry, MAP_RANGE, 129)


@pytest.fixture(scope="session")
def ground_initial(trap_map):
    return tf_ground_state(trap_map.characterization(B_INITIAL))


@pytest.fixture(scope="session")
def ground_final(trap_map):
    return tf_ground_state(trap_map.characterization(B_FINAL))


@pytest.fixture(scope="session")
def sta150(trap_map):
    return sta_ramp(0.15, trap_map, 2048)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, passed, detail)``."""
    table = request.config.stash.setdefault(_CRITERIA, {})

    def record(number, passed, detail):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        table[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash.get(_CRITERIA, {})
    if table:
        terminalreporter.section("acceptance criteria")
        for number in sorted(table):
            terminalreporter.write_line(table[number])
