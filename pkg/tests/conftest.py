import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for status in ("passed", "failed"):
        for rep in terminalreporter.stats.get(status, []):
            if rep.when != "call" or "::test_criterion_" not in rep.nodeid:
                continue
            name = rep.nodeid.split("::")[-1]
            detail = dict(rep.user_properties).get("verdict", {}).get("detail", "")
            lines.append((name, "PASS" if rep.passed else "FAIL", detail))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, status, detail in sorted(lines, key=lambda t: int(t[0].split("_")[2])):
            terminalreporter.write_line(f"{status}  {name}  {detail}".rstrip())
