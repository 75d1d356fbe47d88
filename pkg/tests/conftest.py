import numpy as np
import pytest

from spkloc.localizer import ArrayGeometry

CRITERIA: dict[int, tuple[str, str]] = {}


def square_geometry(side: float = 0.07) -> ArrayGeometry:
    h = side / 2
    return ArrayGeometry(np.array([[h, h, 0], [-h, h, 0], [-h, -h, 0], [h, -h, 0]]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def square():
    return square_geometry()


def pytest_runtest_logreport(report):
    marker = "test_criterion_"
    if marker not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split(marker, 1)[1].split("[", 1)[0]
        num = int(name.split("_", 1)[0])
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        previous = CRITERIA.get(num, ("PASS", ""))[0]
        if previous == "FAIL":  # parametrized criteria fail if any case fails
            status = "FAIL"
        CRITERIA[num] = (status, name.split("_", 1)[1].replace("_", " "))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(CRITERIA):
        status, title = CRITERIA[num]
        terminalreporter.write_line(f"criterion {num}: {status}  {title}")
