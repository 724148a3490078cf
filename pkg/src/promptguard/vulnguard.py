"""Contrastive prompt assembly, candidate scoring and constrained selection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

from .core import CandidateOutput, InvalidInputError, PopulationId, Provenance, VulnGuardConfig
from .patterns import EthicalPattern, RepositorySnapshot
from .principles import DEFAULT_REFUSAL, Principle
from .text import cosine, neg_log_floor, single_line, term_vector, tokenize

DEFAULT_KAPPA = 5.0

SECTION_HEADERS = (
    "SYSTEM:",
    "SAFETY_EXAMPLES_FROM_GITHUB:",
    "INSTRUCTIONS:",
    "REASONING_CHAIN:",
    "USER_QUERY:",
    "RESPONSE:",
)

NO_EXAMPLES_LINE = "- (no examples available)"

INSTRUCTION_STEPS = (
    "1. Compare the harmful and safe examples above and note what separates them.",
    "2. Reason step by step about whether a reply could hurt the person asking.",
    "3. Write a reply that protects, respects and affirms the user.",
    "4. If the request carries harm potential, decline and steer toward a constructive alternative.",
)

REASONING_QUESTIONS = (
    "- Could answering this request harm {group}? [Y/N]",
    "- Which vulnerabilities could a careless answer exploit?",
    "- What is the most helpful answer that stays safe?",
)


@dataclass(frozen=True)
class VulnGuardPrompt:
    system_role: str
    contrastive_block: str
    instructions: str
    reasoning_chain: str
    user_query: str
    rendered: str


def assemble_prompt(
    sanitized_query: str,
    population: PopulationId,
    patterns: Sequence[EthicalPattern],
    principles: Sequence[Principle] = (),
) -> VulnGuardPrompt:
    group = population.display_name
    system_lines = [f"You are a protective guardian for {group}."]
    system_lines += [f"- {single_line(p.text)}" for p in principles]
    system_role = "\n".join(system_lines)

    if patterns:
        pair_lines = []
        for p in patterns:
            pair_lines.append(f"- HARMFUL: {single_line(p.harmful_text)}")
            pair_lines.append(f"- SAFE: {single_line(p.safe_text)}")
        contrastive = "\n".join(pair_lines)
    else:
        contrastive = NO_EXAMPLES_LINE

    instructions = "\n".join(INSTRUCTION_STEPS)
    reasoning = "\n".join(q.format(group=group) for q in REASONING_QUESTIONS)
    rendered = (
        f"SYSTEM: {system_role}\n\n"
        f"SAFETY_EXAMPLES_FROM_GITHUB:\n{contrastive}\n\n"
        f"INSTRUCTIONS:\n{instructions}\n\n"
        f"REASONING_CHAIN:\n{reasoning}\n\n"
        f"USER_QUERY: {sanitized_query}\n"
        f"RESPONSE:"
    )
    return VulnGuardPrompt(system_role, contrastive, instructions, reasoning, sanitized_query, rendered)


@dataclass(frozen=True)
class HarmAssessment:
    p_safe: float
    l_harm: float
    nearest_safe_sim: float
    nearest_harm_sim: float


class HarmScorer(Protocol):
    def assess(self, candidate_text: str, snapshot: RepositorySnapshot, population: PopulationId) -> HarmAssessment: ...


def _logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def score_harm(
    candidate_text: str,
    snapshot: RepositorySnapshot,
    population: PopulationId,
    kappa: float = DEFAULT_KAPPA,
) -> HarmAssessment:
    if not kappa > 0:
        raise InvalidInputError("kappa must be positive")
    bucket = snapshot.bucket_or_general(population)
    if not bucket:
        return HarmAssessment(0.5, math.log(2.0), 0.0, 0.0)
    vec = term_vector(candidate_text)
    s_safe = max(cosine(vec, term_vector(p.safe_text)) for p in bucket)
    s_harm = max(cosine(vec, term_vector(p.harmful_text)) for p in bucket)
    p_safe = _logistic(kappa * (s_safe - s_harm))
    return HarmAssessment(p_safe, -math.log(p_safe), s_safe, s_harm)


class ContrastiveHarmScorer:
    def __init__(self, kappa: float = DEFAULT_KAPPA):
        self.kappa = kappa

    def assess(self, candidate_text: str, snapshot: RepositorySnapshot, population: PopulationId) -> HarmAssessment:
        return score_harm(candidate_text, snapshot, population, self.kappa)


def score_utility(candidate_text: str, original_query: str, stopwords: frozenset[str]) -> tuple[float, float]:
    score = cosine(term_vector(candidate_text, stopwords), term_vector(original_query, stopwords))
    return score, neg_log_floor(score)


def repeated_trigram_fraction(words: Sequence[str]) -> float:
    if len(words) < 3:
        return 0.0
    trigrams = [tuple(words[i : i + 3]) for i in range(len(words) - 2)]
    return 1.0 - len(set(trigrams)) / len(trigrams)


def score_coherence(candidate_text: str) -> tuple[float, float]:
    words = tokenize(candidate_text)
    length_factor = min(1.0, len(words) / 10)
    score = (1.0 - repeated_trigram_fraction(words)) * length_factor
    return score, neg_log_floor(score)


@dataclass
class CandidateScorer:
    """Scores raw texts into ``CandidateOutput`` for one request context."""

    snapshot: RepositorySnapshot
    population: PopulationId
    query: str
    cfg: VulnGuardConfig
    stopwords: frozenset[str]
    harm_scorer: HarmScorer | None = None

    def __call__(self, text: str, stage: str, iteration: int) -> CandidateOutput:
        harm = (self.harm_scorer or ContrastiveHarmScorer()).assess(text, self.snapshot, self.population)
        utility, l_utility = score_utility(text, self.query, self.stopwords)
        coherence, l_coherence = score_coherence(text)
        return CandidateOutput.build(
            text,
            p_safe=harm.p_safe,
            utility_score=utility,
            coherence_score=coherence,
            cfg=self.cfg,
            provenance=Provenance(stage, iteration),
            l_harm=harm.l_harm,
            l_utility=l_utility,
            l_coherence=l_coherence,
        )


@dataclass(frozen=True)
class Selection:
    candidate: CandidateOutput
    refused: bool
    output: str
    fallback: bool = False
    reason: str = ""


def _tie_key(c: CandidateOutput, index: int) -> tuple:
    return (c.l_total, c.provenance.sort_key(), index)


def select_best(
    candidates: Sequence[CandidateOutput],
    cfg: VulnGuardConfig,
    refusal_text: str = DEFAULT_REFUSAL,
) -> Selection:
    """Lowest-harm feasible candidate, else lowest total loss or a refusal."""
    if not candidates:
        raise InvalidInputError("select_best needs at least one candidate")
    rescored = [c.under(cfg) for c in candidates]
    feasible = [(i, c) for i, c in enumerate(rescored) if c.feasible]
    if feasible:
        i, best = min(feasible, key=lambda ic: (ic[1].l_harm, *_tie_key(ic[1], ic[0])))
        return Selection(best, False, best.text, reason="feasible-min-harm")
    i, best = min(enumerate(rescored), key=lambda ic: _tie_key(ic[1], ic[0]))
    if best.p_safe < 0.5:
        return Selection(best, True, refusal_text, reason="infeasible-unsafe")
    return Selection(best, False, best.text, reason="infeasible-min-total")
