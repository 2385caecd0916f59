import pytest

from obftriage import pipeline
from obftriage.synthetic import make_fixture

_results: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is None:
        return
    n, name = m.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _results[n] = (name, "PASS" if rep.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        name, status = _results[n]
        terminalreporter.write_line(f"[{status}] {n}. {name}")


@pytest.fixture(scope="session")
def fixture_runs(tmp_path_factory):
    """A small synthetic fixture put through the whole pipeline twice."""
    root = tmp_path_factory.mktemp("fixture")
    make_fixture(root / "in", seed=7, n_per_chain=120)
    runs = []
    for name in ("run1", "run2"):
        ctx = pipeline.RunContext.from_file(root / "in" / "config.json", root / name)
        pipeline.run_all(ctx)
        runs.append(root / name)
    return root, runs
