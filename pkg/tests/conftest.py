import pytest

_verdicts: dict[int, tuple[str, str]] = {}


class Criterion:
    """Records one acceptance verdict and turns it into a test outcome."""

    def __init__(self, shortfalls):
        self.shortfalls = shortfalls

    def check(self, number: int, ok: bool, detail: str) -> None:
        _verdicts[number] = ("PASS" if ok else "FAIL", detail)
        if ok:
            return
        if number in self.shortfalls:
            pytest.xfail(f"criterion {number} not met ({detail}); analysis: {self.shortfalls[number]}")
        pytest.fail(f"criterion {number} not met: {detail}")


@pytest.fixture(scope="module")
def criterion(request):
    return Criterion(getattr(request.module, "KNOWN_SHORTFALLS", {}))


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_verdicts):
        verdict, detail = _verdicts[number]
        terminalreporter.write_line(f"criterion {number}: {verdict}  {detail}")
