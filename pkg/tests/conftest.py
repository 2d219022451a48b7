import pytest

# (criterion, passed, detail) appended by the acceptance tests
ACCEPTANCE: list = []


class Recorder:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.done = False

    def verdict(self, ok: bool, detail: str) -> None:
        self.done = True
        ACCEPTANCE.append((self.number, self.title, bool(ok), detail))
        assert ok, f"criterion {self.number} failed: {detail}"


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    rec = Recorder(*marker.args)
    yield rec
    if not rec.done:
        ACCEPTANCE.append((rec.number, rec.title, False, "raised before reaching a verdict"))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}")
