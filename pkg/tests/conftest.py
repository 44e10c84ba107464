"""Suite-wide pytest wiring."""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Print the acceptance verdict lines recorded during the run.

    The acceptance tests append one pass/fail line each to
    test_acceptance.RESULTS; printing them here, after capture is torn
    down, guarantees they reach the terminal on every run mode.
    """
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None) if mod is not None else None
    if lines:
        terminalreporter.write_sep("-", "acceptance")
        for line in lines:
            terminalreporter.write_line(line)
