import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record one acceptance line: verdict(label, passed, detail)."""
    log = request.config.stash[_VERDICTS]

    def record(label, passed, detail):
        log.append((label, bool(passed), detail))
        print(f"{'PASS' if passed else 'FAIL'}  {label}: {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in sorted(lines, key=lambda x: _order(x[0])):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {label}: {detail}")


def _order(label):
    head = label.split()[1] if label.startswith("criterion") else label
    return (int("".join(c for c in head if c.isdigit()) or 0), head)
