import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def record(request, capsys):
    """``record(k, passed, detail)`` prints and stores one acceptance line."""
    table = request.config.stash[ACCEPTANCE]

    def _record(k, passed, detail):
        table[k] = (bool(passed), detail)
        with capsys.disabled():
            print(f"\n  criterion {k}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed
    return _record


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="also run tests marked slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="slow; pass --runslow to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash[ACCEPTANCE]
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, 12):
        if k not in table:
            terminalreporter.write_line(f"criterion {k:2d}: NOT RUN (deselected or skipped)")
            continue
        ok, detail = table[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
