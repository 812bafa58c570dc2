ACCEPTANCE = {}


def record(name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[name] = (passed, detail)
    print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (passed, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
