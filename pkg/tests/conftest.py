from __future__ import annotations

import json
import socket
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"
sys.path.insert(0, str(ROOT / "tools"))  # scripted responders in build_fixtures
FIXTURE_NAMES = ("phantom_01", "phantom_02", "fortinet_01", "fortinet_02", "demisto_01", "demisto_02")
REFERENCED = ("phantom_01", "phantom_02", "fortinet_01", "demisto_01")


def legacy_path(name: str) -> Path:
    for suffix in (".json", ".yml"):
        path = FIXTURES / "legacy" / f"{name}{suffix}"
        if path.exists():
            return path
    raise FileNotFoundError(name)


def minimal_playbook() -> dict:
    start = "start--11111111-1111-4111-8111-111111111111"
    end = "end--22222222-2222-4222-8222-222222222222"
    return {
        "type": "playbook",
        "spec_version": "cacao-2.0",
        "id": "playbook--00000000-0000-4000-8000-000000000000",
        "name": "Minimal",
        "created": "2024-01-01T00:00:00.000Z",
        "modified": "2024-01-01T00:00:00.000Z",
        "workflow_start": start,
        "workflow": {
            start: {"type": "start", "on_completion": end},
            end: {"type": "end"},
        },
    }


@pytest.fixture
def minimal() -> dict:
    return minimal_playbook()


@pytest.fixture
def minimal_text() -> str:
    return json.dumps(minimal_playbook())


class NetworkBlocked(RuntimeError):
    pass


@pytest.fixture(autouse=True)
def no_network(monkeypatch):
    """Any attempt to open an internet socket fails the test."""

    def refuse(*args, **kwargs):
        raise NetworkBlocked("network access is disabled in tests")

    monkeypatch.setattr(socket.socket, "connect", refuse)
    monkeypatch.setattr(socket.socket, "connect_ex", refuse)
    monkeypatch.setattr(socket, "create_connection", refuse)
    monkeypatch.setattr(socket, "getaddrinfo", refuse)


# Acceptance tests carry @pytest.mark.criterion("..."); one line per criterion
# is printed at the end of the run.
_CRITERIA: list[tuple[str, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _CRITERIA.append(("PASS" if report.passed else "FAIL", marker.args[0]))


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.write_sep("=", "acceptance criteria")
        for status, name in _CRITERIA:
            terminalreporter.write_line(f"{status}  {name}")
