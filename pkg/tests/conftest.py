"""Shared test plumbing.

The acceptance tests record one scorecard line each; the terminal-summary
hook reprints the whole scorecard at the end of the run so the per-criterion
pass/FAIL lines are visible regardless of pytest's output capturing.
"""

ACCEPTANCE_LINES = []


def record_acceptance(number, ok, detail):
    line = f"ACCEPTANCE {number} ({'pass' if ok else 'FAIL'}): {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance scorecard")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
