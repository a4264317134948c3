import numpy as np
import pytest
import torch

from progseg.backbone import BackboneConfig
from progseg.dataio import SyntheticSpec, generate_synthetic


@pytest.fixture
def tiny_cfg():
    return BackboneConfig(base_width=4, depth=2, token_dim=8, heads=2, input_size=16, dilation_rates=(1, 2))


@pytest.fixture(scope="session")
def tiny_spec():
    return SyntheticSpec(count=16, n_labeled=4, n_val=4, H=32, W=32, edema_radius=(4, 8), seed=3)


@pytest.fixture(scope="session")
def tiny_data(tiny_spec):
    return generate_synthetic(tiny_spec)


@pytest.fixture
def small32_cfg():
    return BackboneConfig(input_size=32, depth=3, base_width=4, token_dim=16, heads=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: criterion(number, passed, detail)."""

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config.stash[_RESULTS].append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, [])
    if results:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(results):
            terminalreporter.write_line(line)
