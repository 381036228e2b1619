"""Shared fixtures: a session cache of the slow scheme runs and the acceptance report."""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tdisac.schemes import design_sensing, run_scheme  # noqa: E402


class SchemeRuns:
    """Memoized scheme runs keyed by (scheme, scenario digest, eta0)."""

    def __init__(self):
        self._designs = {}
        self._runs = {}

    def design(self, config):
        key = config.digest()
        if key not in self._designs:
            self._designs[key] = design_sensing(config)
        return self._designs[key]

    def get(self, scheme, config, eta0=0.5):
        key = (scheme, config.digest(), None if scheme == "ei" else eta0)
        if key not in self._runs:
            self._runs[key] = run_scheme(scheme, config, eta0, sensing=self.design(config))
        return self._runs[key]


@pytest.fixture(scope="session")
def scheme_runs():
    return SchemeRuns()


_REPORT_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_report(request):
    lines = request.config.stash.setdefault(_REPORT_KEY, [])
    return lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_REPORT_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
