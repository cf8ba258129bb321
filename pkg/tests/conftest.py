import os

import pytest

# Let numba build an 8-worker pool even on small machines so thread-count
# invariance is exercised with real worker threads.
os.environ.setdefault("NUMBA_NUM_THREADS", "8")

_LINES = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion and assert on it."""
    lines = request.config.stash.setdefault(_LINES, [])

    def record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
