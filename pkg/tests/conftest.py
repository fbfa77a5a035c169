"""Shared fixtures plus per-criterion pass/fail reporting.

Tests marked @pytest.mark.criterion(n, "name") are collected into a summary
block printed at the end of the session, one line per acceptance criterion.
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))  # expose oracles.py to tests

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(num, name): acceptance criterion covered by this test")
    config.addinivalue_line("markers", "slow: long-running training test")


def pytest_runtest_makereport(item, call):
    if call.when != "call":
        return
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    num, name = marker.args
    outcome = "FAIL" if call.excinfo is not None else "PASS"
    prev = _CRITERIA.get(num)
    if prev is not None and prev[0] == "FAIL":
        outcome = "FAIL"  # any failing test for a criterion fails the criterion
    _CRITERIA[num] = (outcome, name)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(_CRITERIA):
        outcome, name = _CRITERIA[num]
        terminalreporter.write_line(f"[{outcome}] criterion {num}: {name}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
