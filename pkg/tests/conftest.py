import numpy as np
import pytest

from src.experiments import build_heat_problem, build_signal_problem
from src.measures import SparseMeasure
from tests.problems import TOY_SOURCE, TOY_TIMES, make_toy_problem


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='run the full benchmark experiments')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: full benchmark experiment, needs --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope='session')
def heat():
    return build_heat_problem()


@pytest.fixture(scope='session')
def signal():
    return build_signal_problem()


@pytest.fixture
def toy():
    return make_toy_problem()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_measure(rng):
    """Factory for random sparse measures inside a problem's box."""
    def factory(problem, n_atoms=3, scale=1.0):
        lo, hi = problem.domain.lo, problem.domain.hi
        positions = lo + (hi - lo) * rng.uniform(0.05, 0.95, size=(n_atoms, problem.dim))
        weights = scale * rng.uniform(0.2, 1.0, size=n_atoms) * rng.choice([-1.0, 1.0], size=n_atoms)
        return SparseMeasure.from_atoms(positions, weights)
    return factory


@pytest.fixture
def toy_config(tmp_path):
    """The toy problem as a YAML problem config file."""
    path = tmp_path / 'toy.yaml'
    times = ', '.join(f"{t:.17g}" for t in TOY_TIMES)
    path.write_text(
        "name: toy\n"
        "domain: {lo: [0.0], hi: [10.0]}\n"
        f"kernel: {{type: sine, times: [{times}]}}\n"
        "alpha: 0.1\n"
        "params: {R: 0.05, sigma: 0.05, C_K: 4.4721, C_Kp: 16.9}\n"
        f"ground_truth: [{{x: [{TOY_SOURCE}], w: 1.0}}]\n"
    )
    return path
