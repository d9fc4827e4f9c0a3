from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings

from domainforge.corpus_store import CjkCharTokenizer, ingest
from synthdata import build_fixture

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


@pytest.fixture
def tok() -> CjkCharTokenizer:
    return CjkCharTokenizer()


@pytest.fixture(scope="session")
def mixed_corpus():
    """(records, in_domain_flags) for the 1,000-document synthetic corpus."""
    return build_fixture()


@pytest.fixture(scope="session")
def mixed_store(mixed_corpus):
    records, _ = mixed_corpus
    return ingest(records, CjkCharTokenizer(), min_tokens=10)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One visible pass/fail line per acceptance criterion."""
    seen: dict[str, str] = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" in nodeid:
                name = nodeid.split("::")[-1]
                seen[name] = "PASS" if outcome == "passed" else "FAIL"
    if seen:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name in sorted(seen):
            terminalreporter.write_line(f"{seen[name]} {name}")
