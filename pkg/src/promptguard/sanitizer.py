"""Input classification and sanitization.

PII detection (regex families plus a Luhn-checked card detector), redaction,
lexicon-based harm screening, population classification and the gate that
combines them into a verdict.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

from .core import InvalidInputError, ParseError, PopulationId, ValidationError
from .text import count_whole_word, whole_word_pattern


class PiiCategory(str, Enum):
    SSN = "SSN"
    PHONE = "PHONE"
    EMAIL = "EMAIL"
    CREDIT_CARD = "CREDIT_CARD"


# overlap tie-break order
CATEGORY_RANK = {
    PiiCategory.SSN: 0,
    PiiCategory.CREDIT_CARD: 1,
    PiiCategory.PHONE: 2,
    PiiCategory.EMAIL: 3,
}

PII_PATTERNS: dict[PiiCategory, re.Pattern[str]] = {
    PiiCategory.SSN: re.compile(r"\b\d{3}-\d{2}-\d{4}\b"),
    PiiCategory.PHONE: re.compile(r"\b\(?\d{3}\)?[-. ]\d{3}[-. ]\d{4}\b"),
    PiiCategory.EMAIL: re.compile(r"\b[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}\b"),
}

# digit runs where consecutive digits are joined by at most one space or hyphen
_DIGIT_RUN = re.compile(r"\d(?:[ -]?\d)*")

SYNTHETIC_PLACEHOLDERS = {
    PiiCategory.SSN: "000-00-0000",
    PiiCategory.PHONE: "555-000-0000",
    PiiCategory.EMAIL: "user@example.invalid",
    PiiCategory.CREDIT_CARD: "4000000000000002",
}

REDACTION_MODES = ("mask", "synthetic", "remove")


@dataclass(frozen=True)
class PiiMatch:
    category: PiiCategory
    start: int
    end: int
    surface: str

    @property
    def span(self) -> tuple[int, int]:
        return self.start, self.end

    def to_dict(self, include_surface: bool = True) -> dict:
        out = {"category": self.category.value, "span": [self.start, self.end]}
        if include_surface:
            out["surface"] = self.surface
        return out


def luhn_valid(digits: str) -> bool:
    total = 0
    for i, ch in enumerate(reversed(digits)):
        d = ord(ch) - 48
        if i % 2 == 1:
            d *= 2
            if d > 9:
                d -= 9
        total += d
    return total % 10 == 0


def _is_word_char(ch: str) -> bool:
    return ch.isalnum() or ch == "_"


def _card_candidates(text: str) -> Iterable[tuple[int, int]]:
    for run in _DIGIT_RUN.finditer(text):
        positions = [run.start() + i for i, ch in enumerate(run.group()) if ch.isdigit()]
        n = len(positions)
        for i in range(n):
            start = positions[i]
            if start > 0 and _is_word_char(text[start - 1]):
                continue
            for j in range(i + 12, min(i + 16, n)):
                end = positions[j] + 1
                if end < len(text) and _is_word_char(text[end]):
                    continue
                digits = "".join(text[p] for p in positions[i : j + 1])
                if luhn_valid(digits):
                    yield start, end


def _regex_candidates(pattern: re.Pattern[str], text: str) -> Iterable[tuple[int, int]]:
    # every leftmost match from every start position, so overlapping hits survive
    pos = 0
    while pos <= len(text):
        m = pattern.search(text, pos)
        if m is None:
            return
        if m.end() > m.start():
            yield m.start(), m.end()
        pos = m.start() + 1


def scan_pii(text: str) -> list[PiiMatch]:
    """Leftmost-longest, non-overlapping PII matches in ``text``."""
    if not text:
        return []
    candidates: list[tuple[int, int, PiiCategory]] = []
    for category, pattern in PII_PATTERNS.items():
        candidates.extend((s, e, category) for s, e in _regex_candidates(pattern, text))
    candidates.extend((s, e, PiiCategory.CREDIT_CARD) for s, e in _card_candidates(text))
    candidates.sort(key=lambda c: (c[0], -(c[1] - c[0]), CATEGORY_RANK[c[2]]))

    matches: list[PiiMatch] = []
    last_end = -1
    for start, end, category in candidates:
        if start < last_end:
            continue
        matches.append(PiiMatch(category, start, end, text[start:end]))
        last_end = end
    return matches


class PiiDetector(Protocol):
    def scan(self, text: str) -> list[PiiMatch]: ...


class RegexLuhnDetector:
    """The shipped detector. NER or service-backed detectors plug in beside it."""

    def scan(self, text: str) -> list[PiiMatch]:
        return scan_pii(text)


_MASK_TOKEN = re.compile(r"\[REDACTED:[A-Z_]+:\d+\]")


def strip_masks(text: str) -> str:
    """Drop mask tokens so they do not count as content words."""
    return " ".join(_MASK_TOKEN.sub(" ", text).split())


def redact(text: str, matches: Sequence[PiiMatch], mode: str = "mask") -> str:
    if mode not in REDACTION_MODES:
        raise InvalidInputError(f"unknown redaction mode {mode!r}")
    if not matches:
        return text
    ordered = sorted(matches, key=lambda m: m.start)
    prev_end = 0
    for m in ordered:
        if m.start < prev_end or m.end > len(text) or m.start < 0 or m.end <= m.start:
            raise InvalidInputError(f"match span {m.span} out of bounds or overlapping")
        if text[m.start : m.end] != m.surface:
            raise InvalidInputError(f"match span {m.span} does not belong to this text")
        prev_end = m.end

    if mode == "remove":
        segments = [text[: ordered[0].start]]
        segments += [text[a.end : b.start] for a, b in zip(ordered, ordered[1:])]
        segments.append(text[ordered[-1].end :])
        out = segments[0]
        for seg in segments[1:]:
            out = out.rstrip()
            seg = seg.lstrip()
            out = f"{out} {seg}" if out and seg else out + seg
        return out

    counters: dict[PiiCategory, int] = {}
    pieces: list[str] = []
    cursor = 0
    for m in ordered:
        pieces.append(text[cursor : m.start])
        if mode == "mask":
            counters[m.category] = counters.get(m.category, 0) + 1
            pieces.append(f"[REDACTED:{m.category.value}:{counters[m.category]}]")
        else:
            pieces.append(SYNTHETIC_PLACEHOLDERS[m.category])
        cursor = m.end
    pieces.append(text[cursor:])
    return "".join(pieces)


@dataclass(frozen=True)
class LexiconTerm:
    term: str
    severity: float
    pattern: re.Pattern[str] = field(compare=False, repr=False)


class Lexicon:
    """Harm lexicon: whole-word, case-insensitive terms with severity in (0, 1]."""

    def __init__(self, entries: Iterable[tuple[str, float]] = ()):
        terms = []
        for term, severity in entries:
            if not isinstance(term, str) or not term.strip():
                raise ValidationError("lexicon term must be a non-empty string")
            severity = float(severity)
            if not 0 < severity <= 1:
                raise ValidationError(f"lexicon severity for {term!r} must lie in (0, 1]")
            terms.append(LexiconTerm(term.strip(), severity, whole_word_pattern(term)))
        self.terms: tuple[LexiconTerm, ...] = tuple(terms)

    def __len__(self) -> int:
        return len(self.terms)

    def hits(self, text: str) -> list[tuple[LexiconTerm, int]]:
        out = []
        for t in self.terms:
            n = count_whole_word(t.pattern, text)
            if n:
                out.append((t, n))
        return out

    @classmethod
    def load(cls, path: str | Path) -> Lexicon:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(data, list):
            raise ValidationError(f"{path}: lexicon must be a JSON array")
        entries = []
        for i, item in enumerate(data):
            if not isinstance(item, dict) or "term" not in item or "severity" not in item:
                raise ValidationError(f"{path}: entry {i} needs 'term' and 'severity'")
            entries.append((item["term"], item["severity"]))
        return cls(entries)


def screen_harm(text: str, lexicon: Lexicon) -> float:
    """Noisy-or of lexicon severities over every whole-word hit."""
    survive = 1.0
    for term, count in lexicon.hits(text):
        survive *= (1.0 - term.severity) ** count
    return 1.0 - survive


class KeywordMap:
    def __init__(self, entries: Mapping[PopulationId, Sequence[tuple[str, float]]]):
        self.entries: dict[PopulationId, tuple[tuple[str, float, re.Pattern[str]], ...]] = {}
        for population, items in entries.items():
            population = PopulationId.parse(population)
            compiled = []
            for term, weight in items:
                weight = float(weight)
                if weight < 0:
                    raise ValidationError(f"keyword weight for {term!r} must be nonnegative")
                compiled.append((term, weight, whole_word_pattern(term)))
            self.entries[population] = tuple(compiled)

    def scores(self, text: str) -> dict[PopulationId, float]:
        return {
            population: sum(w * count_whole_word(p, text) for _, w, p in items)
            for population, items in self.entries.items()
        }

    @classmethod
    def load(cls, path: str | Path) -> KeywordMap:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ValidationError(f"{path}: keyword map must be a JSON object")
        entries = {}
        for key, items in data.items():
            try:
                population = PopulationId.parse(key)
            except InvalidInputError:
                raise ValidationError(f"{path}: unknown population {key!r}") from None
            entries[population] = [(item["term"], item["weight"]) for item in items]
        return cls(entries)


def classify_population(text: str, keyword_map: KeywordMap) -> tuple[PopulationId, float]:
    scores = keyword_map.scores(text)
    ranked = sorted(
        ((score, population) for population, score in scores.items() if score > 0),
        key=lambda sp: (-sp[0], sp[1].rank),
    )
    if not ranked:
        return PopulationId.GENERAL, 0.0
    top_score, top = ranked[0]
    runner_up = ranked[1][0] if len(ranked) > 1 else 0.0
    if runner_up == 0:
        return top, 1.0
    return top, top_score / (top_score + runner_up)


@dataclass(frozen=True)
class GatePolicy:
    t_modify: float = 0.3
    t_quarantine: float = 0.6
    t_reject: float = 0.9
    redaction_mode: str = "mask"

    def __post_init__(self) -> None:
        if not 0 < self.t_modify < self.t_quarantine < self.t_reject <= 1:
            raise ValidationError("policy thresholds must satisfy 0 < t_modify < t_quarantine < t_reject <= 1")
        if self.redaction_mode not in ("mask", "remove"):
            # synthetic placeholders are themselves pattern matches
            raise ValidationError("gate redaction mode must be 'mask' or 'remove'")

    def verdict(self, risk: float) -> str:
        if risk < self.t_modify:
            return "pass"
        if risk < self.t_quarantine:
            return "modify"
        if risk < self.t_reject:
            return "quarantine"
        return "reject"


@dataclass(frozen=True)
class SanitizationResult:
    clean_text: str
    matches: tuple[PiiMatch, ...]
    risk_score: float
    verdict: str
    population: PopulationId
    population_confidence: float

    def to_dict(self) -> dict:
        return {
            "clean_text": self.clean_text,
            "matches": [m.to_dict(include_surface=False) for m in self.matches],
            "risk_score": self.risk_score,
            "verdict": self.verdict,
            "population": self.population.value,
            "population_confidence": self.population_confidence,
        }


def gate(
    prompt: str,
    policy: GatePolicy,
    lexicon: Lexicon,
    keyword_map: KeywordMap,
    population_hint: PopulationId | None = None,
    detector: PiiDetector | None = None,
) -> SanitizationResult:
    detector = detector or RegexLuhnDetector()
    matches = detector.scan(prompt)
    redacted = redact(prompt, matches, policy.redaction_mode)
    risk = screen_harm(redacted, lexicon)
    if population_hint is not None:
        population, confidence = population_hint, 1.0
    else:
        population, confidence = classify_population(redacted, keyword_map)
    verdict = policy.verdict(risk)
    return SanitizationResult(
        clean_text="" if verdict == "reject" else redacted,
        matches=tuple(matches),
        risk_score=risk,
        verdict=verdict,
        population=population,
        population_confidence=confidence,
    )

