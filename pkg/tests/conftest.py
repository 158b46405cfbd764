import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from refqsr.config import NetworkConfig  # noqa: E402
from refqsr.weights import init_random  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_net():
    return NetworkConfig(num_resblocks=4, channels=8, num_refer_blocks=1)


@pytest.fixture(scope="session")
def small_weights(small_net):
    return init_random(small_net, seed=3)


@pytest.fixture(scope="session")
def default_weights():
    return init_random(NetworkConfig(), seed=0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
