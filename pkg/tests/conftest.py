import pytest

_acceptance: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    """Record one acceptance line, then fail the test if the criterion failed."""
    def record(criterion: str, ok: bool, detail: str) -> None:
        _acceptance[criterion] = (ok, detail)
        assert ok, f"criterion {criterion}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_acceptance, key=lambda k: (int(k.split(".")[0]), k)):
        ok, detail = _acceptance[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-hour benchmark (deselect with -m 'not slow')")
