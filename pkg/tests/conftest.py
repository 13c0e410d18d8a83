import pytest

_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Collects one line per acceptance criterion; printed in the terminal summary."""
    def record(number, passed, detail, soft=False, table=""):
        verdict = "PASS" if passed else ("WARN" if soft else "FAIL")
        line = f"criterion {number}: {verdict}  {detail}"
        _ACCEPTANCE_LINES.append((number, line, table))
        print(line)
        if table:
            print(table)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line, table in sorted(_ACCEPTANCE_LINES, key=lambda x: x[0]):
        terminalreporter.write_line(line)
        for row in table.splitlines():
            terminalreporter.write_line("    " + row)
