import pytest
import torch

_RESULTS = []


def pytest_addoption(parser):
    parser.addoption("--long", action="store_true", default=False,
                     help="run the long opt-in acceptance criteria")


def pytest_configure(config):
    config.addinivalue_line("markers", "long: opt-in long-running acceptance criterion")
    torch.set_num_threads(1)


def pytest_collection_modifyitems(config, items):
    if config.getoption("--long"):
        return
    skip = pytest.mark.skip(reason="opt-in: pass --long")
    for item in items:
        if "long" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(number, passed, detail)``."""

    def record(number, passed, detail=""):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}".rstrip()
        _RESULTS.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in _RESULTS:
            terminalreporter.write_line(line)
