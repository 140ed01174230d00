import time

import pytest

from ptqkit.experiments import load_mnist, train_toy
from ptqkit.graph import fuse_bn


@pytest.fixture(scope="session")
def mnist():
    return load_mnist()


@pytest.fixture(scope="session")
def trained_timed(mnist):
    train, test = mnist
    t0 = time.perf_counter()
    model, acc = train_toy(train, test, seed=0)
    return model, acc, time.perf_counter() - t0


@pytest.fixture(scope="session")
def trained(trained_timed):
    """The toy CNN trained once per session: (model_with_bn, fp_accuracy)."""
    return trained_timed[:2]


@pytest.fixture(scope="session")
def fused(trained):
    return fuse_bn(trained[0])


VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line: ``verdict(n, ok, detail)``."""
    lines = request.config.stash.setdefault(VERDICTS, [])

    def record(number, ok, detail):
        lines.append((number, ok, detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(lines, key=lambda t: t[0]):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
