import numpy as np
import pytest

from ecc.network import LayerSpec, Network

# lines recorded by the acceptance suite, echoed once at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_conv_net(seed=0, activation="relu"):
    layers = [
        LayerSpec("conv", 3, 2, 3, 3, activation, stride=1, padding=1, name="c1"),
        LayerSpec("conv", 4, 3, 2, 2, activation, stride=2, padding=0, name="c2"),
        LayerSpec("fc", 3, 4, activation="none", name="out"),
    ]
    return Network.init(layers, (2, 5, 5), seed=seed)


def small_fc_net(seed=0):
    layers = [LayerSpec("fc", 5, 4, name="h"), LayerSpec("fc", 3, 5, activation="none", name="o")]
    return Network.init(layers, (4,), seed=seed)
