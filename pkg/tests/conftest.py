import numpy as np
import pytest

from sliver import _accel

BACKENDS = ["numba", "numpy"] if _accel.HAVE_NUMBA else ["numpy"]


@pytest.fixture(params=BACKENDS)
def backend(request):
    prev = _accel.set_backend(request.param)
    yield request.param
    _accel.set_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


class _Criterion:
    def __init__(self, lines, number, title):
        self.lines, self.number, self.title, self.detail = lines, number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"acceptance {self.number:>2} {status}: {self.title}" + (f" ({self.detail})" if self.detail else "")
        self.lines[self.number] = line
        print(line)
        return False


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as c: ...`` records one pass/fail line per acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})
    return lambda number, title: _Criterion(lines, number, title)


_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
