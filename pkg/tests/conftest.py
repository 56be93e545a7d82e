import pytest

_RESULTS = {}


class AcceptanceLog:
    def record(self, number, passed, detail):
        _RESULTS[number] = (bool(passed), detail)
        line = f"acceptance {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        return passed


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        passed, detail = _RESULTS[number]
        terminalreporter.write_line(f"{number:>2} {'PASS' if passed else 'FAIL'}  {detail}")
