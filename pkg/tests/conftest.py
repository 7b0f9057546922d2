import pytest

_LINES: dict[int, str] = {}


class Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title

    def check(self, ok: bool, detail: str):
        line = f"criterion {self.number:2d} [{'PASS' if ok else 'FAIL'}] {self.title}: {detail}"
        _LINES[self.number] = line
        print(line)
        assert ok, line

    def skip(self, reason: str):
        _LINES[self.number] = f"criterion {self.number:2d} [SKIP] {self.title}: {reason}"
        pytest.skip(reason)


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_LINES):
        terminalreporter.write_line(_LINES[n])
