import numpy as np
import pytest

from backdoor_lab import nn


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def randomise(layer, rng, scale=1.0):
    for p in layer.params:
        p[...] = rng.normal(size=p.shape) * scale
    return layer


def dense(W, b=None, dtype=np.float64):
    W = np.asarray(W, dtype=dtype)
    layer = nn.Dense(W.shape[1], W.shape[0], dtype=dtype)
    layer.W[...] = W
    if b is not None:
        layer.b[...] = b
    return layer


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in mod.LINES:
            terminalreporter.write_line(line)
