"""Versioned constitutions and population-scoped principle selection."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .core import InvalidInputError, ParseError, PopulationId, ValidationError

NO_PRINCIPLES_LINE = "No specific principles; apply general safety."

DEFAULT_REFUSAL = (
    "I can't help with that request as written. If you are looking for support, "
    "I'm glad to share respectful, accurate information or point you to trusted resources."
)

_SEMVER = re.compile(r"^\d+\.\d+\.\d+(?:[-+][0-9A-Za-z.-]+)?$")


@dataclass(frozen=True)
class Principle:
    id: str
    text: str
    populations: tuple[PopulationId, ...] = ()
    priority: int = 0
    role_persona: str | None = None
    style_directives: tuple[str, ...] = ()
    # optional keyword checks used for adherence scoring
    required_keywords: tuple[str, ...] = ()
    forbidden_keywords: tuple[str, ...] = ()

    @property
    def universal(self) -> bool:
        return not self.populations

    @property
    def checkable(self) -> bool:
        return bool(self.required_keywords or self.forbidden_keywords)

    def applies_to(self, population: PopulationId) -> bool:
        return self.universal or population in self.populations


@dataclass(frozen=True)
class Constitution:
    name: str
    version: str
    principles: tuple[Principle, ...]
    refusal_templates: Mapping[PopulationId, str] = field(default_factory=dict)
    provenance: str = ""

    def refusal_for(self, population: PopulationId) -> str:
        return (
            self.refusal_templates.get(population)
            or self.refusal_templates.get(PopulationId.GENERAL)
            or DEFAULT_REFUSAL
        )


def _str_list(value: Any, where: str) -> tuple[str, ...]:
    if value is None:
        return ()
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ValidationError(f"{where}: expected a list of strings")
    return tuple(value)


def parse_constitution(data: Any, origin: str = "<constitution>") -> Constitution:
    if not isinstance(data, dict):
        raise ValidationError(f"{origin}: constitution must be a JSON object")
    for key in ("name", "version", "principles"):
        if key not in data:
            raise ValidationError(f"{origin}: missing '{key}'")
    if not isinstance(data["version"], str) or not _SEMVER.match(data["version"]):
        raise ValidationError(f"{origin}: version must be a semantic version string")
    if not isinstance(data["principles"], list):
        raise ValidationError(f"{origin}: 'principles' must be a list")

    principles: list[Principle] = []
    seen: set[str] = set()
    for i, raw in enumerate(data["principles"]):
        where = f"{origin}: principles[{i}]"
        if not isinstance(raw, dict):
            raise ValidationError(f"{where}: expected an object")
        pid = raw.get("id")
        text = raw.get("text")
        if not isinstance(pid, str) or not pid:
            raise ValidationError(f"{where}: 'id' must be a non-empty string")
        if pid in seen:
            raise ValidationError(f"{where}: duplicate principle id {pid!r}")
        seen.add(pid)
        if not isinstance(text, str) or not text.strip():
            raise ValidationError(f"{where}: 'text' must be non-empty")
        priority = raw.get("priority", 0)
        if isinstance(priority, bool) or not isinstance(priority, int) or priority < 0:
            raise ValidationError(f"{where}: 'priority' must be an integer >= 0")
        try:
            populations = tuple(PopulationId.parse(p) for p in _str_list(raw.get("populations"), where))
        except InvalidInputError as exc:
            raise ValidationError(f"{where}: {exc}") from None
        persona = raw.get("role_persona")
        if persona is not None and not isinstance(persona, str):
            raise ValidationError(f"{where}: 'role_persona' must be a string")
        principles.append(
            Principle(
                id=pid,
                text=text.strip(),
                populations=populations,
                priority=priority,
                role_persona=persona,
                style_directives=_str_list(raw.get("style_directives"), where),
                required_keywords=_str_list(raw.get("required_keywords"), where),
                forbidden_keywords=_str_list(raw.get("forbidden_keywords"), where),
            )
        )

    templates: dict[PopulationId, str] = {}
    for key, text in (data.get("refusal_templates") or {}).items():
        try:
            templates[PopulationId.parse(key)] = str(text)
        except InvalidInputError:
            raise ValidationError(f"{origin}: refusal_templates: unknown population {key!r}") from None

    return Constitution(
        name=str(data["name"]),
        version=data["version"],
        principles=tuple(principles),
        refusal_templates=templates,
        provenance=str(data.get("provenance") or ""),
    )


def load_constitution(path: str | Path) -> Constitution:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_constitution(data, str(path))


def principles_for(constitution: Constitution, population: PopulationId) -> list[Principle]:
    chosen = [p for p in constitution.principles if p.applies_to(population)]
    return sorted(chosen, key=lambda p: (p.priority, p.id))


def render_rubric(principles: list[Principle], extra_guidelines: str = "") -> str:
    if principles:
        lines = [f"{i}. {p.text}" for i, p in enumerate(principles, start=1)]
    else:
        lines = [NO_PRINCIPLES_LINE]
    if extra_guidelines.strip():
        lines.append("Task-specific guidelines:")
        lines.append(extra_guidelines.strip())
    return "\n".join(lines)


def render_persona(principles: list[Principle]) -> str:
    """Persona and style lines gathered from the active principles."""
    lines: list[str] = []
    for p in principles:
        if p.role_persona and p.role_persona not in lines:
            lines.append(p.role_persona)
    for p in principles:
        for directive in p.style_directives:
            if directive not in lines:
                lines.append(directive)
    return "\n".join(lines)
