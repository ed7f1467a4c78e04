import pytest

from seqfn import tensor as tn

_ACCEPTANCE: list[tuple[str, str, str]] = []


class AcceptanceRecorder:
    """Collects one verdict line per acceptance criterion for the end-of-run summary."""

    def __init__(self, criterion: str, title: str):
        self.criterion, self.title = criterion, title

    def check(self, passed: bool, detail: str) -> None:
        _ACCEPTANCE.append((self.criterion, "PASS" if passed else "FAIL", f"{self.title}: {detail}"))
        print(f"criterion {self.criterion} {'PASS' if passed else 'FAIL'} - {self.title}: {detail}")
        assert passed, f"criterion {self.criterion} failed: {detail}"

    def skip(self, reason: str) -> None:
        _ACCEPTANCE.append((self.criterion, "SKIP", f"{self.title}: {reason}"))
        pytest.skip(reason)


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    return AcceptanceRecorder(*marker.args)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.fixture(autouse=True)
def _reference_mode():
    with tn.precision("reference"):
        yield


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, verdict, text in sorted(_ACCEPTANCE, key=lambda r: int(r[0])):
        terminalreporter.write_line(f"[{verdict}] {number:>2}. {text}")
