import sys


def pytest_terminal_summary(terminalreporter):
    # acceptance lines are captured for passing tests, so repeat them here
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(results):
        terminalreporter.write_line(results[k])
