def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance criteria verdicts after capture ends."""
    try:
        from tests.test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
