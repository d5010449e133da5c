import pytest

_RESULTS: dict[int, tuple[bool, str]] = {}


class Criterion:
    """Records one acceptance line; ``check`` both records and asserts."""

    def __init__(self, number: int):
        self.number = number

    def check(self, passed: bool, detail: str) -> None:
        line = f"criterion {self.number}: {'PASS' if passed else 'FAIL'} - {detail}"
        print(line)
        prev = _RESULTS.get(self.number)
        if prev is None or prev[0]:
            _RESULTS[self.number] = (passed, detail)
        assert passed, line


@pytest.fixture
def criterion(request):
    return Criterion(request.node.get_closest_marker("criterion").args[0])


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        passed, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'} - {detail}")
