import pytest

from billiard_lab.fixtures import FIXTURE_NAMES, load_fixture

_CACHE = {}


def fixture_table(name):
    if name not in _CACHE:
        _CACHE[name] = load_fixture(name)
    return _CACHE[name]


@pytest.fixture(scope="session")
def circle04():
    return fixture_table("circle04")


@pytest.fixture(scope="session")
def circle03():
    return fixture_table("circle03")


@pytest.fixture(scope="session")
def fig1():
    return fixture_table("fig1")


@pytest.fixture(scope="session")
def all_fixtures():
    return {name: fixture_table(name) for name in FIXTURE_NAMES}


ACCEPTANCE_LINES = []


def report(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
