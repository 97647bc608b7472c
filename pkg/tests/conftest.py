"""Shared pytest plumbing.

The acceptance tests register one (number, description, status) tuple per
criterion; this hook prints them after the run so the lines survive
output capture.
"""

ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, desc, status, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {num:2d}: {status}  {desc}{detail}")
