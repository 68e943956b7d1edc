import os
from pathlib import Path

import pytest

from etta.pipeline import DeskConfig, run_desk_pipeline

_LINES: list[str] = []


@pytest.fixture(scope="session")
def desk_config():
    return DeskConfig()


@pytest.fixture(scope="session")
def desk(tmp_path_factory, desk_config):
    """Artifacts of the full desk pipeline.

    Set ETTA_ACCEPTANCE_DIR to keep them between sessions; finished stages are reused.
    """
    cached = os.environ.get("ETTA_ACCEPTANCE_DIR")
    out = Path(cached) if cached else tmp_path_factory.mktemp("desk")
    run_desk_pipeline(out, desk_config)
    return out


@pytest.fixture(scope="session")
def acceptance_report():
    def report(line: str) -> None:
        print(line)
        _LINES.append(line)
    return report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
