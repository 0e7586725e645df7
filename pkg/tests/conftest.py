import pytest

from pkgx.env import WalkEnv
from pkgx.kg import load_triples

TOY_LINES = ["a\tr\tb", "a\tr\tc", "b\tr\tc", "c\tr\td"]


@pytest.fixture
def toy_kg():
    return load_triples(TOY_LINES)


@pytest.fixture
def toy_env(toy_kg):
    return WalkEnv(toy_kg, t_max=3, inverse_edges=False)


@pytest.fixture(scope="session")
def planted():
    from pkgx.synthetic import planted_path_kg

    return planted_path_kg(seed=0)


# -- acceptance summary: one PASS/FAIL line per criterion ------------------------

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    ok = rep.passed and _ACCEPTANCE.get(n, (title, True))[1]
    if rep.when == "call" or not rep.passed:
        _ACCEPTANCE[n] = (title, ok)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, ok = _ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {title}")
