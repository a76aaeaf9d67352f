import pytest

from deqann.deq import CERTIFICATES

# (criterion, passed, detail) lines filled in by test_acceptance
ACCEPTANCE = []


@pytest.fixture(autouse=True)
def no_certificate_violations():
    """Every converged forward solve must pass its equilibrium re-check."""
    before = CERTIFICATES["violations"]
    yield
    assert CERTIFICATES["violations"] == before, "equilibrium certificate violated"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        rows = [r for r in ACCEPTANCE if r[0] != 10]
        if len(rows) < len(ACCEPTANCE):
            # the certificate criterion covers every test, so report the final tally
            rows.append((10, CERTIFICATES["violations"] == 0 and CERTIFICATES["checked"] > 0,
                         f"{CERTIFICATES['checked']} certificates checked over the run, "
                         f"{CERTIFICATES['violations']} violations"))
        terminalreporter.section("acceptance criteria")
        for key, ok, detail in sorted(rows, key=lambda r: r[0]):
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {key}: {detail}")
    terminalreporter.write_line(
        f"equilibrium certificates over the whole run: {CERTIFICATES['checked']} checked, "
        f"{CERTIFICATES['violations']} violations")
