"""Append-only trace records, one JSONL stream per trace id."""

from __future__ import annotations

import itertools
import json
import re
import secrets
import threading
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .backend import Backend, BackendError, BackendRequest, Completion, generate
from .core import STAGE_ORDER
from .sanitizer import redact, scan_pii

_TRACE_ID = re.compile(r"^[0-9a-f]{32}$")


@dataclass(frozen=True)
class TraceRecord:
    trace_id: str
    stage: str
    iteration: int
    kind: str  # call | failure | score | gate | verify | validate
    prompt_text: str
    response_text: str
    timestamp: int
    backend_id: str = "none"
    scores: dict[str, Any] | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def order_key(self) -> tuple[int, int, int]:
        return STAGE_ORDER.index(self.stage), self.iteration, self.timestamp

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class TraceStore:
    """Keeps records in memory and, when a directory is given, in ``<id>.jsonl``."""

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory is not None else None
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
        self._records: dict[str, list[TraceRecord]] = defaultdict(list)
        self._locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._guard = threading.Lock()

    def _lock(self, trace_id: str) -> threading.Lock:
        with self._guard:
            return self._locks[trace_id]

    def append(self, record: TraceRecord) -> None:
        with self._lock(record.trace_id):
            self._records[record.trace_id].append(record)
            if self.directory is not None:
                with open(self.directory / f"{record.trace_id}.jsonl", "a", encoding="utf-8") as fh:
                    fh.write(record.to_json() + "\n")

    def get(self, trace_id: str) -> list[TraceRecord]:
        with self._lock(trace_id):
            if trace_id in self._records:
                return list(self._records[trace_id])
        if self.directory is not None and _TRACE_ID.match(trace_id):
            path = self.directory / f"{trace_id}.jsonl"
            if path.exists():
                return [TraceRecord(**json.loads(line)) for line in path.read_text(encoding="utf-8").splitlines() if line]
        raise KeyError(trace_id)

    def jsonl(self, trace_id: str) -> str:
        return "".join(r.to_json() + "\n" for r in self.get(trace_id))


def new_trace_id() -> str:
    return secrets.token_hex(16)


class Tracer:
    """Per-request recorder; every backend call goes through :meth:`call`."""

    def __init__(self, store: TraceStore, trace_id: str | None = None, retries: int = 2, base_delay: float = 0.1):
        self.store = store
        self.trace_id = trace_id or new_trace_id()
        self.retries = retries
        self.base_delay = base_delay
        self._tick = itertools.count(1)
        self.backend_calls = 0

    def record(
        self,
        stage: str,
        iteration: int,
        kind: str,
        prompt_text: str = "",
        response_text: str = "",
        backend_id: str = "none",
        scores: dict[str, Any] | None = None,
        **metadata: Any,
    ) -> TraceRecord:
        rec = TraceRecord(
            trace_id=self.trace_id,
            stage=stage,
            iteration=iteration,
            kind=kind,
            prompt_text=prompt_text,
            response_text=response_text,
            timestamp=next(self._tick),
            backend_id=backend_id,
            scores=scores,
            metadata={"monotonic": time.monotonic(), **metadata},
        )
        self.store.append(rec)
        return rec

    def call(self, stage: str, iteration: int, backend: Backend, prompt: str, temperature: float, max_tokens: int, **metadata: Any) -> Completion:
        self.backend_calls += 1
        try:
            done = generate(
                backend,
                BackendRequest(prompt, temperature, max_tokens, backend.backend_id),
                retries=self.retries,
                base_delay=self.base_delay,
            )
        except BackendError as exc:
            self.record(stage, iteration, "failure", prompt, "", backend.backend_id, error=str(exc), attempts=exc.attempts, **metadata)
            raise
        # responses are stored masked; prompts are already PII-free by construction
        response = redact(done.text, scan_pii(done.text), "mask")
        self.record(
            stage, iteration, "call", prompt, response, backend.backend_id,
            latency_ms=round(done.latency_ms, 3), attempts=done.attempts, **metadata,
        )
        return done
