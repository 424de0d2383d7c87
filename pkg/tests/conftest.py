import sys


def pytest_terminal_summary(terminalreporter):
    # one line per acceptance criterion, whatever the capture mode
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.pytest_terminal_summary_lines():
        terminalreporter.write_line(line)
