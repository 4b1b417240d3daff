import numpy as np
import pytest

from s2ft.netspec import init_block


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_block():
    return init_block(8, 2, 12, seed=3)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or rep.when not in ("call", "setup"):
                continue
            if outcome == "passed" and rep.when != "call":
                continue
            name = nodeid.split("::")[-1]
            num = int(name.split("_")[2])
            detail = dict(rep.user_properties).get("detail", "")
            lines.append((num, f"criterion {num:2d} {'PASS' if outcome == 'passed' else 'FAIL'}  {name}  {detail}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
