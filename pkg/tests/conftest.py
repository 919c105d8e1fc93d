import numpy as np
import pytest

from stokesqbx.geometry import SpheroidShape, build_grid

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def report(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    def record(n, ok, detail):
        line = f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} {detail}"
        print(line)
        request.config.stash[ACCEPTANCE].append(line)
        return ok
    return record


@pytest.fixture(scope="session")
def sphere16():
    return build_grid(SpheroidShape(1.0, 1.0), 16)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
