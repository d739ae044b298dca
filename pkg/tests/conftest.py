"""Shared pytest hooks for the test suite."""


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance-criterion result lines past output capture."""
    try:
        from test_acceptance import ANNOUNCEMENTS
    except ImportError:
        return
    if ANNOUNCEMENTS:
        terminalreporter.section("acceptance criteria")
        for line in ANNOUNCEMENTS:
            terminalreporter.write_line(line)
