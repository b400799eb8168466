import numpy as np
import pytest

from unionrobust.models import ModelSpec, build


def tiny_mlp(n_features=16, n_classes=3, widths=(8,), seed=0):
    spec = ModelSpec("mlp", (1, 4, n_features // 4), n_classes, widths=widths)
    return spec, build(spec, seed)


def tiny_cnn(seed=0):
    spec = ModelSpec("mnist_cnn", (1, 8, 8), 4, filters=(3, 4), hidden=6)
    return spec, build(spec, seed)


def images(rng, b, shape=(1, 4, 4)):
    return rng.uniform(0.0, 1.0, size=(b,) + shape)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running experiments")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    status = "SKIPPED" if ok is None else "PASS" if ok else "FAIL"
    line = f"criterion {number}: {status} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
