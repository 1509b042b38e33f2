import sys

import pytest

from mmfl.model import TaskSpec, generate_scenario


@pytest.fixture
def small_scenario():
    specs = [TaskSpec(0, 1.0, 3, 2), TaskSpec(1, 3.0, 4, 3)]
    return generate_scenario(specs, 6, (20, 30), seed=5, test_size=200)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = module.report_lines() if module else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
