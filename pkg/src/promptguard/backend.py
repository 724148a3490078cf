"""Text-generation backends: the scripted mock and an HTTP chat-completion adapter."""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol

import httpx

from .core import InvalidInputError, ParseError, PromptGuardError

logger = logging.getLogger(__name__)

MOCK_MODES = ("static", "counter", "error")


class BackendError(PromptGuardError):
    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


class TransientBackendError(BackendError):
    """Failure worth retrying (timeouts, 5xx, scripted outages)."""


@dataclass(frozen=True)
class BackendRequest:
    prompt: str
    temperature: float = 0.7
    max_tokens: int = 512
    backend_id: str = "mock"

    def __post_init__(self) -> None:
        if not self.prompt:
            raise InvalidInputError("backend prompt must be non-empty")
        if self.temperature < 0:
            raise InvalidInputError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise InvalidInputError("max_tokens must be positive")


class Backend(Protocol):
    backend_id: str

    def complete(self, request: BackendRequest) -> str: ...


@dataclass(frozen=True)
class Completion:
    text: str
    latency_ms: float
    attempts: int
    backend_id: str


def generate(
    backend: Backend,
    request: BackendRequest,
    retries: int = 2,
    base_delay: float = 0.1,
    sleep: Callable[[float], None] = time.sleep,
) -> Completion:
    """Call ``backend`` with exponential-backoff retries on transient failures."""
    attempts = 0
    delay = base_delay
    started = time.perf_counter()
    while True:
        attempts += 1
        try:
            text = backend.complete(request)
        except TransientBackendError as exc:
            if attempts > retries:
                raise BackendError(f"{backend.backend_id}: {exc} after {attempts} attempts", attempts) from exc
            logger.warning("backend %s attempt %d failed: %s", backend.backend_id, attempts, exc)
            sleep(delay)
            delay *= 2
            continue
        except BackendError as exc:
            raise BackendError(f"{backend.backend_id}: {exc}", attempts) from exc
        latency = (time.perf_counter() - started) * 1000.0
        return Completion(text, latency, attempts, backend.backend_id)


@dataclass
class MockRule:
    match: str
    response: str
    regex: bool = False
    mode: str = "static"
    calls: int = 0
    _compiled: re.Pattern[str] | None = field(default=None, repr=False)

    def matches(self, prompt: str) -> bool:
        if self.regex:
            assert self._compiled is not None
            return self._compiled.search(prompt) is not None
        return self.match in prompt


@dataclass
class MockScript:
    rules: list[MockRule]

    @classmethod
    def from_dict(cls, data: Any) -> MockScript:
        if not isinstance(data, dict) or not isinstance(data.get("rules", []), list):
            raise ParseError("mock script must be an object with a 'rules' list")
        rules = []
        for i, raw in enumerate(data.get("rules", []), start=1):
            if not isinstance(raw, dict) or "match" not in raw:
                raise ParseError(f"rule {i}: needs 'match'")
            mode = raw.get("mode", "static")
            if "response" not in raw and mode != "error":
                raise ParseError(f"rule {i}: needs 'response'")
            if mode not in MOCK_MODES:
                raise ParseError(f"rule {i}: unknown mode {mode!r}")
            rule = MockRule(str(raw["match"]), str(raw.get("response", "")), bool(raw.get("regex", False)), mode)
            if rule.regex:
                try:
                    rule._compiled = re.compile(rule.match)
                except re.error as exc:
                    raise ParseError(f"rule {i}: invalid regex ({exc})") from None
            rules.append(rule)
        return cls(rules)


def load_script(path: str | Path) -> MockScript:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return MockScript.from_dict(data)


class MockBackend:
    """Deterministic scripted backend; the first matching rule answers."""

    def __init__(self, script: MockScript | None = None, backend_id: str = "mock"):
        self.script = script or MockScript([])
        self.backend_id = backend_id
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path, backend_id: str = "mock") -> MockBackend:
        return cls(load_script(path), backend_id)

    @classmethod
    def from_rules(cls, rules: list[dict], backend_id: str = "mock") -> MockBackend:
        return cls(MockScript.from_dict({"rules": rules}), backend_id)

    def fresh(self) -> MockBackend:
        """Same script with all counters reset."""
        rules = [MockRule(r.match, r.response, r.regex, r.mode, 0, r._compiled) for r in self.script.rules]
        return MockBackend(MockScript(rules), self.backend_id)

    def complete(self, request: BackendRequest) -> str:
        prompt = request.prompt
        for rule in self.script.rules:
            if rule.matches(prompt):
                with self._lock:
                    rule.calls += 1
                    n = rule.calls
                if rule.mode == "error":
                    raise TransientBackendError(rule.response or "scripted outage")
                if rule.mode == "counter":
                    return rule.response.replace("{{n}}", str(n))
                return rule.response
        return f"OK: {prompt[:40]}"


class HttpBackend:
    """Minimal chat-completion client: one user message in, first choice out."""

    def __init__(
        self,
        backend_id: str,
        base_url: str,
        model_name: str,
        api_key_env_var: str | None = None,
        timeout_ms: int = 30000,
        transport: httpx.BaseTransport | None = None,
    ):
        self.backend_id = backend_id
        self.model_name = model_name
        self.api_key_env_var = api_key_env_var
        self._client = httpx.Client(base_url=base_url.rstrip("/"), timeout=timeout_ms / 1000.0, transport=transport)

    def complete(self, request: BackendRequest) -> str:
        headers = {}
        if self.api_key_env_var:
            key = os.environ.get(self.api_key_env_var)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        body = {
            "model": self.model_name,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        try:
            resp = self._client.post("/chat/completions", json=body, headers=headers)
        except (httpx.TimeoutException, httpx.TransportError) as exc:
            raise TransientBackendError(f"transport failure: {exc}") from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise TransientBackendError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"unexpected response shape: {exc}") from exc

    def close(self) -> None:
        self._client.close()
