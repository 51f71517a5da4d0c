acceptance_lines: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not acceptance_lines:
        return
    terminalreporter.section("acceptance checks")
    for line in acceptance_lines:
        terminalreporter.write_line(line)
