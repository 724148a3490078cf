"""External tool broker with a ReAct-format verification loop."""

from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

from .backend import Backend, BackendError, BackendRequest, generate
from .core import ParseError, PromptGuardError, ValidationError
from .sanitizer import Lexicon, redact, scan_pii, screen_harm
from .templates import load_templates, render

TOOL_KINDS = ("pii_scan", "toxicity", "fact_lookup", "custom")
MAX_OBSERVATION_CHARS = 2000
TIMEOUT_OBSERVATION = "ERROR: timeout"

_EXECUTOR = ThreadPoolExecutor(max_workers=8, thread_name_prefix="tool")


class RegistryError(PromptGuardError):
    pass


class MalformedStepError(ParseError):
    pass


@dataclass(frozen=True)
class ToolSpec:
    tool_id: str
    kind: str
    description: str = ""
    timeout: float = 2.0
    fixture_path: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in TOOL_KINDS:
            raise ValidationError(f"tool {self.tool_id}: unknown kind {self.kind!r}")


@dataclass
class ReActStep:
    thought: str = ""
    action: str = ""
    action_input: str = ""
    observation: str = ""

    def to_dict(self) -> dict[str, str]:
        return {
            "thought": self.thought,
            "action": self.action,
            "action_input": self.action_input,
            "observation": self.observation,
        }


_FIELD = re.compile(r"^\s*(Thought|Action Input|Action|Observation|Final Answer)\s*:\s?(.*)$")


def parse_react(model_output: str) -> tuple[list[ReActStep], str | None]:
    """Split model output into steps and an optional final answer.

    Observations written by the model are discarded; the broker fills them.
    """
    steps: list[ReActStep] = []
    current: ReActStep | None = None
    pending_action_line = 0
    lines = model_output.splitlines()
    for lineno, line in enumerate(lines, start=1):
        m = _FIELD.match(line)
        if m is None:
            if current is not None and line.strip() and not pending_action_line:
                current.thought = f"{current.thought}\n{line.strip()}".strip()
            continue
        key, value = m.group(1), m.group(2).strip()
        if pending_action_line and key != "Action Input":
            raise MalformedStepError(f"line {pending_action_line}: 'Action:' without 'Action Input:'")
        if key == "Final Answer":
            rest = [value] + [l.rstrip() for l in lines[lineno:]]
            return steps, "\n".join(rest).strip()
        if key == "Thought":
            current = ReActStep(thought=value)
            steps.append(current)
        elif key == "Action":
            if current is None or current.action:
                current = ReActStep()
                steps.append(current)
            current.action = value
            pending_action_line = lineno
        elif key == "Action Input":
            if current is None or not current.action:
                raise MalformedStepError(f"line {lineno}: 'Action Input:' without 'Action:'")
            current.action_input = value
            pending_action_line = 0
    if pending_action_line:
        raise MalformedStepError(f"line {pending_action_line}: 'Action:' without 'Action Input:'")
    return steps, None


class FactClient(Protocol):
    def lookup(self, query: str) -> str: ...


class FixtureFactClient:
    """Offline stand-in for knowledge-base clients, backed by a key/answer table."""

    def __init__(self, table: Mapping[str, str]):
        self._table = {k.strip().lower(): str(v) for k, v in table.items()}

    @classmethod
    def load(cls, path: str | Path) -> FixtureFactClient:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ValidationError(f"{path}: fixture must be a JSON object")
        return cls(data)

    def lookup(self, query: str) -> str:
        return self._table.get(query.strip().lower(), f"NOT FOUND: {query.strip()}")


class ToolBroker:
    def __init__(
        self,
        specs: Iterable[ToolSpec],
        lexicon: Lexicon,
        fact_clients: Mapping[str, FactClient] | None = None,
        custom: Mapping[str, Callable[[str], str]] | None = None,
    ):
        self.specs: dict[str, ToolSpec] = {}
        for spec in specs:
            if spec.tool_id in self.specs:
                raise RegistryError(f"duplicate tool id {spec.tool_id!r}")
            self.specs[spec.tool_id] = spec
        self.lexicon = lexicon
        self.fact_clients = dict(fact_clients or {})
        self.custom = dict(custom or {})

    def describe(self, tool_ids: Sequence[str]) -> str:
        return "\n".join(f"- {t}: {self.specs[t].description or self.specs[t].kind}" for t in tool_ids if t in self.specs)

    def _run(self, spec: ToolSpec, text: str) -> str:
        if spec.kind == "pii_scan":
            # categories and spans only, so observations never carry the PII itself
            return json.dumps([m.to_dict(include_surface=False) for m in scan_pii(text)])
        if spec.kind == "toxicity":
            return f"toxicity={screen_harm(text, self.lexicon):.3f}"
        if spec.kind == "fact_lookup":
            client = self.fact_clients.get(spec.tool_id)
            if client is None:
                return "ERROR: no client configured"
            return client.lookup(text)
        fn = self.custom.get(spec.tool_id)
        if fn is None:
            return "ERROR: no handler registered"
        return str(fn(text))

    def invoke(self, tool_id: str, text: str) -> str:
        spec = self.specs.get(tool_id)
        if spec is None:
            raise RegistryError(f"unknown tool {tool_id!r}")
        future = _EXECUTOR.submit(self._run, spec, text)
        try:
            observation = future.result(timeout=spec.timeout)
        except FutureTimeout:
            return TIMEOUT_OBSERVATION
        return observation[:MAX_OBSERVATION_CHARS]


@dataclass
class VerificationSummary:
    pii_clean: bool
    toxicity: float
    notes: str
    steps: list[ReActStep] = field(default_factory=list)
    degraded: bool = False
    backend_calls: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "pii_clean": self.pii_clean,
            "toxicity": self.toxicity,
            "notes": self.notes,
            "steps": [s.to_dict() for s in self.steps],
            "degraded": self.degraded,
        }


CANDIDATE_TOKEN = "CANDIDATE"


def _default_react_template() -> str:
    return load_templates()["react"]


def run_react_loop(
    candidate_text: str,
    tools: Sequence[str],
    broker: ToolBroker,
    backend: Backend,
    max_steps: int = 4,
    template: str | None = None,
    on_call: Callable[[int, str, str | None, str | None], None] | None = None,
    retries: int = 2,
    base_delay: float = 0.1,
) -> VerificationSummary:
    """Alternate backend reasoning with broker-supplied observations.

    ``on_call(step, prompt, response, error)`` is invoked once per backend call
    so the caller can trace it. ``pii_clean`` and ``toxicity`` always come from
    running the checks directly on ``candidate_text``.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    allowed = [t for t in tools if t in broker.specs]
    found = scan_pii(candidate_text)
    direct_pii_clean = not found
    shown = redact(candidate_text, found, "mask")
    direct_toxicity = screen_harm(candidate_text, broker.lexicon)

    transcript: list[str] = []
    executed: list[ReActStep] = []
    final_answer: str | None = None
    calls = 0
    for step_no in range(1, max_steps + 1):
        prompt = render(
            template or _default_react_template(),
            tools=broker.describe(allowed) or "- (none)",
            candidate=shown,
            transcript="\n".join(transcript) or "(empty)",
        )
        calls += 1
        try:
            response = generate(backend, BackendRequest(prompt, 0.0, 256, backend.backend_id), retries, base_delay).text
        except BackendError as exc:
            if on_call:
                on_call(step_no, prompt, None, str(exc))
            return VerificationSummary(
                direct_pii_clean, direct_toxicity, f"backend unavailable; direct checks only ({exc})",
                executed, degraded=True, backend_calls=calls,
            )
        # the model's own text feeds later prompts, so it is masked first
        response = redact(response, scan_pii(response), "mask")
        if on_call:
            on_call(step_no, prompt, response, None)
        try:
            steps, final_answer = parse_react(response)
        except MalformedStepError as exc:
            transcript.append(f"Observation: ERROR: {exc}")
            continue
        for step in steps:
            if step.action:
                if step.action not in allowed:
                    step.observation = "ERROR: tool not permitted in this plan"
                else:
                    arg = step.action_input
                    if not arg or arg == CANDIDATE_TOKEN:
                        arg = candidate_text
                    step.observation = broker.invoke(step.action, arg)
            executed.append(step)
            transcript += [
                f"Thought: {step.thought}",
                f"Action: {step.action}",
                f"Action Input: {step.action_input}",
                f"Observation: {step.observation}",
            ]
        if final_answer is not None:
            break

    notes = final_answer if final_answer is not None else "step budget exhausted"
    return VerificationSummary(direct_pii_clean, direct_toxicity, notes, executed, backend_calls=calls)
