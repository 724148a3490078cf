"""Ethical pattern repository: harmful/safe exemplar pairs per population."""

from __future__ import annotations

import json
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Callable, Generic, Mapping, TypeVar

from .core import InvalidInputError, ParseError, PopulationId, PromptGuardError, ValidationError, POPULATION_ORDER
from .text import cosine, term_vector

Similarity = Callable[[str, str], float]


class EmptyRepositoryError(PromptGuardError):
    pass


@dataclass(frozen=True)
class EthicalPattern:
    id: str
    population: PopulationId
    category: str
    severity: int
    harmful_text: str
    safe_text: str
    tags: tuple[str, ...] = ()
    source: str = ""

    def __post_init__(self) -> None:
        if not self.id:
            raise ValidationError("pattern id must be non-empty")
        if not self.harmful_text.strip() or not self.safe_text.strip():
            raise ValidationError(f"pattern {self.id}: harmful_text and safe_text must be non-empty")
        if self.harmful_text == self.safe_text:
            raise ValidationError(f"pattern {self.id}: harmful_text equals safe_text")
        if isinstance(self.severity, bool) or not isinstance(self.severity, int) or not 1 <= self.severity <= 5:
            raise ValidationError(f"pattern {self.id}: severity must be an integer in 1..5")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> EthicalPattern:
        missing = [k for k in ("id", "population", "category", "severity", "harmful_text", "safe_text") if k not in data]
        if missing:
            raise ValidationError(f"missing field(s): {', '.join(missing)}")
        for key in ("id", "category", "harmful_text", "safe_text"):
            if not isinstance(data[key], str):
                raise ValidationError(f"field {key!r} must be a string")
        try:
            population = PopulationId.parse(data["population"])
        except InvalidInputError as exc:
            raise ValidationError(str(exc)) from None
        tags = data.get("tags") or []
        if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
            raise ValidationError("tags must be a list of strings")
        return cls(
            id=data["id"],
            population=population,
            category=data["category"],
            severity=data["severity"],
            harmful_text=data["harmful_text"],
            safe_text=data["safe_text"],
            tags=tuple(tags),
            source=str(data.get("source") or ""),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "population": self.population.value,
            "category": self.category,
            "severity": self.severity,
            "harmful_text": self.harmful_text,
            "safe_text": self.safe_text,
            "tags": list(self.tags),
            "source": self.source,
        }


@dataclass(frozen=True)
class RepositorySnapshot:
    patterns: tuple[EthicalPattern, ...]
    version: int
    index: Mapping[PopulationId, tuple[str, ...]] = field(init=False)
    _by_id: Mapping[str, EthicalPattern] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        by_id: dict[str, EthicalPattern] = {}
        buckets: dict[PopulationId, list[str]] = {p: [] for p in POPULATION_ORDER}
        for pattern in self.patterns:
            if pattern.id in by_id:
                raise ValidationError(f"duplicate pattern id {pattern.id!r}")
            by_id[pattern.id] = pattern
            buckets[pattern.population].append(pattern.id)
        object.__setattr__(self, "_by_id", MappingProxyType(by_id))
        object.__setattr__(self, "index", MappingProxyType({p: tuple(ids) for p, ids in buckets.items()}))

    def __len__(self) -> int:
        return len(self.patterns)

    def get(self, pattern_id: str) -> EthicalPattern:
        return self._by_id[pattern_id]

    def bucket(self, population: PopulationId) -> tuple[EthicalPattern, ...]:
        return tuple(self._by_id[i] for i in self.index[population])

    def bucket_or_general(self, population: PopulationId) -> tuple[EthicalPattern, ...]:
        found = self.bucket(population)
        return found if found else self.bucket(PopulationId.GENERAL)

    def sizes(self) -> dict[str, int]:
        out = {p.value: len(ids) for p, ids in self.index.items() if ids}
        out["total"] = len(self.patterns)
        return out

    def category_counts(self) -> dict[str, dict[str, int]]:
        counts: dict[str, Counter[str]] = {}
        for pattern in self.patterns:
            counts.setdefault(pattern.population.value, Counter())[pattern.category] += 1
        return {pop: dict(sorted(c.items())) for pop, c in counts.items()}


def parse_patterns(lines: list[str], origin: str = "<patterns>") -> list[EthicalPattern]:
    patterns: list[EthicalPattern] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{origin}: line {lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(data, dict):
            raise ParseError(f"{origin}: line {lineno}: expected a JSON object")
        try:
            patterns.append(EthicalPattern.from_dict(data))
        except ValidationError as exc:
            raise ParseError(f"{origin}: line {lineno}: {exc}") from None
    return patterns


def load(path: str | Path, previous_version: int = 0) -> RepositorySnapshot:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not valid UTF-8 ({exc})") from None
    patterns = parse_patterns(text.splitlines(), str(path))
    if not patterns:
        raise ValidationError(f"{path}: pattern file is empty")
    return RepositorySnapshot(tuple(patterns), version=previous_version + 1)


def reload(path: str | Path, current: RepositorySnapshot) -> RepositorySnapshot:
    return load(path, previous_version=current.version)


def select_contrastive(
    snapshot: RepositorySnapshot,
    population: PopulationId,
    query_text: str,
    k: int,
    similarity: Similarity | None = None,
) -> list[EthicalPattern]:
    """Top-``k`` exemplars of ``population`` closest to the query.

    Ranked by descending similarity of the query to each harmful text, then
    higher severity, then id. An empty population bucket falls back to the
    ``general`` bucket.
    """
    if k < 1:
        raise InvalidInputError("k must be at least 1")
    if not snapshot.patterns:
        raise EmptyRepositoryError("pattern repository is empty")
    bucket = snapshot.bucket_or_general(population)
    if similarity is None:
        query_vec = term_vector(query_text)
        scored = [(cosine(query_vec, term_vector(p.harmful_text)), p) for p in bucket]
    else:
        scored = [(similarity(query_text, p.harmful_text), p) for p in bucket]
    # similarities equal up to float noise count as ties
    scored.sort(key=lambda sp: (-round(sp[0], 12), -sp[1].severity, sp[1].id))
    return [p for _, p in scored[:k]]


T = TypeVar("T")


class SnapshotRef(Generic[T]):
    """Holder for the active snapshot; readers take a reference, reloads swap it."""

    def __init__(self, value: T):
        self._value = value
        self._lock = threading.Lock()

    def get(self) -> T:
        return self._value

    def swap(self, build: Callable[[T], T]) -> T:
        # build runs under the lock so concurrent reloads get distinct versions;
        # on error the active value is untouched
        with self._lock:
            new = build(self._value)
            self._value = new
            return new
