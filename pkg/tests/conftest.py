import pytest

_RESULTS = {}


class AcceptanceReport:
    def check(self, number: int, ok: bool, detail: str) -> None:
        _RESULTS[number] = (bool(ok), detail)
        assert ok, f"criterion {number}: {detail}"


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceReport()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        ok, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}: {detail}")
