import acceptance_report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not acceptance_report.RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, ok, detail in acceptance_report.RESULTS:
        status = "PASS" if ok else "FAIL"
        line = f"{status}  {name}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
