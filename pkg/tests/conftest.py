import pytest

from testbed_fidelity.oracle_synth import search_chain_model

_ACCEPTANCE = []


@pytest.fixture
def record_criterion():
    """Record one acceptance line: record_criterion(number, passed, detail)."""

    def record(number, passed, detail=""):
        _ACCEPTANCE.append((number, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {detail}")


@pytest.fixture
def search_chain():
    """open -> read (.99) | error (.01); read -> read (.75) | close (.25)."""
    return search_chain_model()
