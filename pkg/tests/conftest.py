import os

import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(autouse=True, scope="session")
def _isolated_cache(tmp_path_factory):
    """Pretrained baselines go to a per-session cache unless ABLATE_CACHE is set."""
    mp = pytest.MonkeyPatch()
    if "ABLATE_CACHE" not in os.environ:
        mp.setenv("ABLATE_CACHE", str(tmp_path_factory.mktemp("cache")))
    yield
    mp.undo()


@pytest.fixture
def acceptance_line(capsys):
    """Print one verdict line immediately and repeat it in the final summary."""

    def emit(line: str) -> None:
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
