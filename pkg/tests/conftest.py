import numpy as np
import pytest

from cfpf import kernels
from cfpf.channel import NetworkConfig, drop_network

DESK = NetworkConfig(M=20, K=8, tau=4)


def pytest_addoption(parser):
    parser.addoption("--fullscale", action="store_true", default=False,
                     help="run the multi-hour full-scale end-to-end check")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--fullscale"):
        return
    skip = pytest.mark.skip(reason="needs --fullscale")
    for item in items:
        if "fullscale" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request):
    return request.param


@pytest.fixture
def desk_drop():
    return drop_network(DESK, 11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance report ------------------------------------------------------------

ACCEPTANCE = []


@pytest.fixture
def report():
    """Record one pass/fail line for an acceptance criterion."""

    def _report(name, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
