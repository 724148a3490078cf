from __future__ import annotations

import pytest

from promptguard.backend import MockBackend
from promptguard.config import GatewayConfig, build_pipeline
from promptguard.pipeline import Pipeline

# A scripted backend that answers every stage of the default plan sensibly.
SAFE_RULES = [
    {"match": "FRAMING_GUIDELINES:", "response": "1. avoid jargon\n2. offer one next step"},
    {"match": "JUDGE TASK", "response": "SCORE: 8/10\nGood."},
    {"match": "VERIFICATION TASK", "response": "Thought: check PII\nAction: pii_scan\nAction Input: CANDIDATE\nFinal Answer: clean"},
    {"match": "CRITIQUE REQUEST", "response": "Mention a trusted adult."},
    {
        "match": "REVISION REQUEST",
        "response": "Being bullied at school is not something you caused. Talk to a teacher or parent about the bullying at school today.",
    },
    {
        "match": r"VARIATION: \d",
        "regex": True,
        "response": "Nobody deserves to be bullied at school. Talking to a teacher or parent can help you feel safer at school.",
    },
]


def make_pipeline(rules: list[dict] | None = None, backend=None, **cfg_overrides) -> Pipeline:
    cfg = GatewayConfig.load()
    cfg.retry_base_ms = 0
    for key, value in cfg_overrides.items():
        setattr(cfg, key, value)
    backends = {"mock": backend if backend is not None else MockBackend.from_rules(rules if rules is not None else SAFE_RULES)}
    return build_pipeline(cfg, backends)


@pytest.fixture
def pipeline() -> Pipeline:
    return make_pipeline()


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
