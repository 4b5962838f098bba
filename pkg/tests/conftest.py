import numpy as np
import pytest

from convexcip.basis import LaguerreBasis, PseudoFrequencyGrid, cached_operators
from convexcip.forward import SpaceTimeGrid, simulate
from convexcip.pipeline import ExperimentConfig, builtin_profile


@pytest.fixture(scope="session")
def basis():
    return LaguerreBasis()


@pytest.fixture(scope="session")
def sgrid():
    return PseudoFrequencyGrid()


@pytest.fixture(scope="session")
def operators(basis, tmp_path_factory):
    """Interaction tensor and linear coupling at the default quadrature."""
    return cached_operators(basis, cache_dir=tmp_path_factory.mktemp("tensor"))


@pytest.fixture(scope="session")
def grid():
    return SpaceTimeGrid()


@pytest.fixture(scope="session")
def example_traces(grid):
    """Noiseless traces for each built-in medium (0 is homogeneous)."""
    cache = {}

    def get(example):
        if example not in cache:
            cache[example] = simulate(builtin_profile(example, grid.x), grid)
        return cache[example]

    return get


@pytest.fixture(scope="session")
def noiseless():
    return ExperimentConfig(noise=0.0)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


# one line per acceptance criterion, printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE, key=lambda item: item[0]):
            terminalreporter.write_line(line)
