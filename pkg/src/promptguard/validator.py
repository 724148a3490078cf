"""Output validation: metric vector, threshold gates and consistent selection."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

from .backend import Backend, BackendRequest, generate
from .core import CandidateOutput, GenerationRequest, InvalidInputError, ValidationError, VulnGuardConfig
from .principles import DEFAULT_REFUSAL, Principle
from .sanitizer import Lexicon, scan_pii, screen_harm
from .templates import render
from .text import count_whole_word, tokenize, whole_word_pattern
from .vulnguard import Selection, select_best

TOXICITY_LIMIT = 0.5
CONSTRAINT_KINDS = ("must_contain", "must_not_contain", "max_words", "min_words")


@dataclass(frozen=True)
class MetricPlugin:
    """Extra gate: ``fn(candidate, request)`` returns a value in [0, 1]."""

    name: str
    fn: Callable[[CandidateOutput, GenerationRequest], float]
    direction: str = "max"  # "max": value must stay <= threshold; "min": >= threshold
    threshold: float = 0.5

    def passes(self, value: float) -> bool:
        return value <= self.threshold if self.direction == "max" else value >= self.threshold


@dataclass
class ValidationReport:
    pii_leakage_count: int
    toxicity: float
    l_harm: float
    l_utility: float
    l_coherence: float
    l_total: float
    p_safe: float
    utility_score: float
    coherence_score: float
    adherence: float
    ifr: float
    verdicts: dict[str, bool]
    overall: bool = field(init=False)
    judge_score: float | None = None
    metrics: dict[str, float] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.overall = all(self.verdicts.values())

    def set_verdict(self, gate: str, passed: bool) -> None:
        self.verdicts[gate] = passed
        self.overall = all(self.verdicts.values())

    def to_dict(self) -> dict[str, Any]:
        return {
            "pii_leakage_count": self.pii_leakage_count,
            "toxicity": self.toxicity,
            "l_harm": self.l_harm,
            "l_utility": self.l_utility,
            "l_coherence": self.l_coherence,
            "l_total": self.l_total,
            "p_safe": self.p_safe,
            "utility_score": self.utility_score,
            "coherence_score": self.coherence_score,
            "adherence": self.adherence,
            "ifr": self.ifr,
            "verdicts": dict(self.verdicts),
            "overall": self.overall,
            "judge_score": self.judge_score,
            "metrics": dict(self.metrics),
            "notes": list(self.notes),
        }


def _contains(text: str, term: str) -> bool:
    return count_whole_word(whole_word_pattern(term), text) > 0


def principle_satisfied(principle: Principle, text: str) -> bool:
    return all(_contains(text, k) for k in principle.required_keywords) and not any(
        _contains(text, k) for k in principle.forbidden_keywords
    )


def adherence_rate(principles: Sequence[Principle], text: str) -> float:
    checkable = [p for p in principles if p.checkable]
    if not checkable:
        return 1.0
    return sum(principle_satisfied(p, text) for p in checkable) / len(checkable)


def parse_constraints(options: Mapping[str, Any]) -> list[dict[str, Any]]:
    raw = options.get("constraints") or []
    if not isinstance(raw, list):
        raise ValidationError("options.constraints must be a list")
    out = []
    for i, c in enumerate(raw):
        if not isinstance(c, dict) or c.get("kind") not in CONSTRAINT_KINDS:
            raise ValidationError(f"options.constraints[{i}]: kind must be one of {', '.join(CONSTRAINT_KINDS)}")
        if c["kind"] in ("must_contain", "must_not_contain"):
            terms = c.get("terms")
            if not isinstance(terms, list) or not all(isinstance(t, str) and t.strip() for t in terms):
                raise ValidationError(f"options.constraints[{i}]: 'terms' must be a list of strings")
        else:
            value = c.get("value")
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise ValidationError(f"options.constraints[{i}]: 'value' must be a nonnegative integer")
        out.append(c)
    return out


def constraint_satisfied(constraint: Mapping[str, Any], text: str) -> bool:
    kind = constraint["kind"]
    if kind == "must_contain":
        return all(_contains(text, t) for t in constraint["terms"])
    if kind == "must_not_contain":
        return not any(_contains(text, t) for t in constraint["terms"])
    words = len(tokenize(text))
    return words <= constraint["value"] if kind == "max_words" else words >= constraint["value"]


def instruction_following_rate(constraints: Sequence[Mapping[str, Any]], text: str) -> float:
    if not constraints:
        return 1.0
    return sum(constraint_satisfied(c, text) for c in constraints) / len(constraints)


def validate(
    candidate: CandidateOutput,
    request: GenerationRequest,
    principles: Sequence[Principle],
    cfg: VulnGuardConfig,
    lexicon: Lexicon,
    plugins: Sequence[MetricPlugin] = (),
) -> ValidationReport:
    text = candidate.text
    c = candidate.under(cfg)
    pii = len(scan_pii(text))
    toxicity = screen_harm(text, lexicon)
    verdicts = {
        "pii": pii == 0,
        "toxicity": toxicity < TOXICITY_LIMIT,
        "harm": c.l_harm <= cfg.epsilon or c.p_safe >= 0.5,
        "utility": c.utility_score >= cfg.tau_utility,
        "coherence": c.coherence_score >= cfg.tau_coherence,
    }
    metrics = {}
    for plugin in plugins:
        value = float(plugin.fn(candidate, request))
        metrics[plugin.name] = value
        verdicts[plugin.name] = plugin.passes(value)
    return ValidationReport(
        pii_leakage_count=pii,
        toxicity=toxicity,
        l_harm=c.l_harm,
        l_utility=c.l_utility,
        l_coherence=c.l_coherence,
        l_total=c.l_total,
        p_safe=c.p_safe,
        utility_score=c.utility_score,
        coherence_score=c.coherence_score,
        adherence=adherence_rate(principles, text),
        ifr=instruction_following_rate(parse_constraints(request.options), text),
        verdicts=verdicts,
        metrics=metrics,
    )


def composite_score(report: ValidationReport) -> float:
    return 0.5 * report.p_safe + 0.25 * report.adherence + 0.25 * report.ifr


def select_consistent(
    candidates_with_reports: Sequence[tuple[CandidateOutput, ValidationReport]],
    cfg: VulnGuardConfig,
    refusal_text: str = DEFAULT_REFUSAL,
) -> Selection:
    """Best composite among passing candidates; otherwise ``select_best`` rules."""
    if not candidates_with_reports:
        raise InvalidInputError("select_consistent needs at least one candidate")
    passing = [(i, c, r) for i, (c, r) in enumerate(candidates_with_reports) if r.overall]
    if passing:
        i, best, _ = min(
            passing,
            key=lambda icr: (-composite_score(icr[2]), icr[2].l_total, icr[1].provenance.sort_key(), icr[0]),
        )
        return Selection(best, False, best.text, reason="consistent-max-composite")
    sel = select_best([c for c, _ in candidates_with_reports], cfg, refusal_text)
    return Selection(sel.candidate, sel.refused, sel.output, fallback=True, reason=sel.reason)


_SCORE_LINE = re.compile(r"^\s*SCORE:\s*(\d+(?:\.\d+)?)\s*/\s*10\s*$", re.IGNORECASE)


@dataclass(frozen=True)
class JudgeResult:
    score: float | None
    critique: str
    note: str = ""


def parse_judge(response: str) -> JudgeResult:
    lines = response.strip().splitlines()
    if lines:
        m = _SCORE_LINE.match(lines[0])
        if m and 0 <= float(m.group(1)) <= 10:
            value = float(m.group(1))
            score = int(value) if value.is_integer() else value
            return JudgeResult(score, "\n".join(lines[1:]).strip())
    return JudgeResult(None, response.strip(), note="judge score unparsable; advisory score absent")


def judge_with_llm(
    candidate: CandidateOutput,
    rubric: str,
    backend: Backend,
    template: str,
    temperature: float = 0.0,
    max_tokens: int = 256,
) -> tuple[JudgeResult, str]:
    """Ask a judge backend for a 0-10 score; returns the result and the prompt sent."""
    prompt = render(template, rubric=rubric, candidate=candidate.text)
    response = generate(backend, BackendRequest(prompt, temperature, max_tokens, backend.backend_id)).text
    return parse_judge(response), prompt


def judge_gate(result: JudgeResult, threshold: float) -> bool:
    return result.score is not None and result.score >= threshold
