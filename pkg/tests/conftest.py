import sys

import pytest

from ldcmia.pipeline import RunConfig, run_pipeline


@pytest.fixture(scope="session")
def overfit_run():
    """One in-memory run of the default overfit fixture, shared across tests."""
    return run_pipeline(RunConfig.from_dict())


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
