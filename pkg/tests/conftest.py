from pathlib import Path

import pytest

CORPUS = Path(__file__).parent / "corpus"


def corpus_scripts() -> list[Path]:
    return sorted(CORPUS.glob("*.tla"))


@pytest.fixture
def registry():
    from tla.primitives import default_registry

    return default_registry()


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
