import numpy as np
import pytest

_acceptance_lines = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "acceptance" in report.keywords:
        label = dict(report.user_properties).get("criterion", report.nodeid.split("::")[-1])
        status = "PASS" if report.passed else "FAIL"
        detail = dict(report.user_properties).get("detail", "")
        _acceptance_lines.append(f"{status}  {label}  {detail}".rstrip())


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
