from __future__ import annotations

import shutil
from pathlib import Path

import pytest

from text2db.gateway import CompletionRequest, ExactMatchEmbedder, Gateway, Transcript

FIXTURES = Path(__file__).parent / "fixtures"
TOURISM = FIXTURES / "tourism"

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _criteria[number] = ("PASS" if report.passed else "FAIL", title)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        status, title = _criteria[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")


def scripted_gateway(pairs: list[tuple[CompletionRequest, str]], **kwargs) -> Gateway:
    """Replay gateway answering each request with its scripted reply."""
    transcript = Transcript(entries=[(req.fingerprint, req.tag, reply) for req, reply in pairs])
    embedders = kwargs.pop("embedders", None) or {"dedup": ExactMatchEmbedder(), "match": ExactMatchEmbedder()}
    return Gateway(embedders=embedders, transcript=transcript, mode="replay", **kwargs)


@pytest.fixture
def tourism_copy(tmp_path: Path) -> Path:
    """A writable copy of the bundled tourism corpus."""
    dest = tmp_path / "tourism"
    shutil.copytree(TOURISM, dest)
    return dest
