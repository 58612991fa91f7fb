import warnings

import numpy as np
import pytest

# numba emits a TBB version warning on import in some environments
warnings.filterwarnings("ignore", message=".*TBB.*")

from gaussct.geometry import GridSpec, make_semicircle_geometry  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_grid():
    return GridSpec.unit_cube(16)


@pytest.fixture
def small_geom():
    return make_semicircle_geometry(4, (24, 36), 2.0, 2.0, (3.2 / 24, 5.0 / 36))


# (criterion, passed, detail) tuples appended by test_acceptance
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
