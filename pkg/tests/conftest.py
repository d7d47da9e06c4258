import numpy as np
import pytest

from cimworst.models import Layer, Network, QuantConfig, TrainConfig, fc, relu, train


def blobs(n=300, seed=0, classes=3, dim=4):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 2.0, size=(classes, dim))
    y = rng.integers(0, classes, size=n)
    return centers[y] + rng.normal(0, 0.8, size=(n, dim)), y


def tiny_network(seed=0, quantize_activations=False):
    layers = [fc("fc1", 4, 16), relu("relu1"), fc("fc2", 16, 3)]
    return Network("tiny", layers, (4,), QuantConfig(quantize_activations=quantize_activations)).init_params(seed)


@pytest.fixture(scope="session")
def trained_tiny():
    x, y = blobs()
    net, _ = train(tiny_network(), x, y, TrainConfig(epochs=15, batch_size=32, val_size=60, lr=0.01))
    return net, x, y


def pytest_terminal_summary(terminalreporter):
    try:
        from acceptance_lib import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
