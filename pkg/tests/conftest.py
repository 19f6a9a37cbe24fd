import numpy as np
import pytest

from glint import fields
from glint.hierarchy import build_hierarchy


@pytest.fixture(scope="session")
def iso256():
    return fields.isotropic(256)


@pytest.fixture(scope="session")
def iso256_hier(iso256):
    return build_hierarchy(iso256)


@pytest.fixture(scope="session")
def iso64():
    return fields.isotropic(64, seed=5)


@pytest.fixture(scope="session")
def iso64_hier(iso64):
    return build_hierarchy(iso64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_DETAILS = {}


@pytest.fixture
def criterion(request):
    """Record a one-line detail for an acceptance criterion and print it."""
    def record(text):
        _DETAILS[request.node.nodeid] = text
        print(f"{request.node.name}: {text}")
    return record


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::" not in nodeid or rep.when not in ("call", "setup"):
                continue
            if outcome == "passed" and rep.when != "call":
                continue
            status = "PASS" if outcome == "passed" else "FAIL"
            lines.append((nodeid, f"{status}  {nodeid.split('::')[-1]}  {_DETAILS.get(nodeid, '')}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
