import pytest

# (criterion number, PASS/FAIL, detail) lines collected by the acceptance tests
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    def report(number, passed, detail):
        line = f"CRITERION {number:>2}: {'PASS' if passed else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES, key=lambda x: x[0]):
        terminalreporter.write_line(line)
