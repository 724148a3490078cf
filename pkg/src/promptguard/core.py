"""Shared domain types, identifiers and configuration."""

from __future__ import annotations

import math
import secrets
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Any, Mapping


class PromptGuardError(Exception):
    """Base class for every error raised by the gateway."""


class InvalidInputError(PromptGuardError, ValueError):
    pass


class ValidationError(PromptGuardError, ValueError):
    """A loaded document or request violates a declared invariant."""


class ParseError(PromptGuardError, ValueError):
    pass


class PopulationId(str, Enum):
    MINORS = "minors"
    PATIENTS = "patients"
    LGBTQ = "lgbtq"
    REFUGEES = "refugees"
    INDIGENOUS = "indigenous"
    NEURODIVERSE = "neurodiverse"
    TRAUMA_SURVIVORS = "trauma_survivors"
    LOW_INCOME = "low_income"
    GENERAL = "general"

    @classmethod
    def parse(cls, value: str | PopulationId) -> PopulationId:
        if isinstance(value, PopulationId):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise InvalidInputError(f"unknown population {value!r}") from None

    @property
    def rank(self) -> int:
        return POPULATION_ORDER.index(self)

    @property
    def display_name(self) -> str:
        return _DISPLAY_NAMES[self]


POPULATION_ORDER: tuple[PopulationId, ...] = tuple(PopulationId)

_DISPLAY_NAMES = {
    PopulationId.MINORS: "minors",
    PopulationId.PATIENTS: "patients",
    PopulationId.LGBTQ: "LGBTQ+ individuals",
    PopulationId.REFUGEES: "refugees and displaced people",
    PopulationId.INDIGENOUS: "Indigenous peoples",
    PopulationId.NEURODIVERSE: "neurodiverse individuals",
    PopulationId.TRAUMA_SURVIVORS: "trauma survivors",
    PopulationId.LOW_INCOME: "low-income communities",
    PopulationId.GENERAL: "all users",
}

# Pipeline positions; "gate" is not a plan stage but orders gate records first.
STAGE_ORDER: tuple[str, ...] = ("gate", "framing", "explore", "verify", "refine", "postvalidate")


def _check_finite(name: str, value: float) -> float:
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise InvalidInputError(f"{name} must be a real number, got {value!r}") from None
    if not math.isfinite(value):
        raise InvalidInputError(f"{name} must be finite, got {value!r}")
    return value


@dataclass(frozen=True)
class VulnGuardConfig:
    """Loss weights, feasibility thresholds and loop budgets."""

    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.25
    tau_utility: float = 0.2
    tau_coherence: float = 0.2
    epsilon: float = 0.05
    max_refine_iters: int = 6
    num_candidates: int = 3

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "gamma", "tau_utility", "tau_coherence", "epsilon"):
            _check_finite(name, getattr(self, name))
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be nonnegative")
        if self.alpha + self.beta + self.gamma <= 0:
            raise InvalidInputError("alpha + beta + gamma must be positive")
        if not 0 < self.epsilon < 1:
            raise InvalidInputError("epsilon must lie in (0, 1)")
        for name in ("max_refine_iters", "num_candidates"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise InvalidInputError(f"{name} must be a positive integer")

    @classmethod
    def field_names(cls) -> frozenset[str]:
        return frozenset(f.name for f in fields(cls))

    def with_overrides(self, overrides: Mapping[str, Any] | None) -> VulnGuardConfig:
        """Return a copy with the config keys of ``overrides`` applied.

        Keys that are not config fields are ignored so that request options
        can carry other settings (constraints, backend choice) alongside.
        """
        if not overrides:
            return self
        known = {k: v for k, v in overrides.items() if k in self.field_names()}
        return replace(self, **known) if known else self

    def scaled(self, factor: float) -> VulnGuardConfig:
        return replace(self, alpha=self.alpha * factor, beta=self.beta * factor, gamma=self.gamma * factor)

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def total_loss(losses: tuple[float, float, float], cfg: VulnGuardConfig) -> float:
    l_harm, l_utility, l_coherence = (_check_finite(n, v) for n, v in zip(("l_harm", "l_utility", "l_coherence"), losses))
    return cfg.alpha * l_harm + cfg.beta * l_utility + cfg.gamma * l_coherence


def new_request_id() -> str:
    return secrets.token_hex(16)


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    population_hint: PopulationId | None = None
    plan_id: str | None = None
    options: Mapping[str, Any] = field(default_factory=dict)
    request_id: str = field(default_factory=new_request_id)

    def __post_init__(self) -> None:
        if not isinstance(self.prompt, str) or not self.prompt.strip():
            raise InvalidInputError("prompt must be non-empty")
        if self.population_hint is not None:
            object.__setattr__(self, "population_hint", PopulationId.parse(self.population_hint))
        # overrides must satisfy the config invariants on their own
        VulnGuardConfig().with_overrides(self.options)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> GenerationRequest:
        population = data.get("population", data.get("population_hint"))
        kwargs: dict[str, Any] = {
            "prompt": data.get("prompt", ""),
            "population_hint": population,
            "plan_id": data.get("plan_id"),
            "options": dict(data.get("options") or {}),
        }
        if data.get("request_id"):
            kwargs["request_id"] = str(data["request_id"])
        return cls(**kwargs)


@dataclass(frozen=True)
class Provenance:
    stage: str
    iteration: int

    def sort_key(self) -> tuple[int, int]:
        rank = STAGE_ORDER.index(self.stage) if self.stage in STAGE_ORDER else len(STAGE_ORDER)
        return rank, self.iteration

    def label(self) -> str:
        return f"{self.stage}#{self.iteration}"


@dataclass(frozen=True)
class CandidateOutput:
    """One generated response with its loss vector and feasibility verdict."""

    text: str
    l_harm: float
    l_utility: float
    l_coherence: float
    l_total: float
    feasible: bool
    provenance: Provenance
    p_safe: float
    utility_score: float
    coherence_score: float

    @classmethod
    def build(
        cls,
        text: str,
        *,
        p_safe: float,
        utility_score: float,
        coherence_score: float,
        cfg: VulnGuardConfig,
        provenance: Provenance,
        l_harm: float | None = None,
        l_utility: float | None = None,
        l_coherence: float | None = None,
    ) -> CandidateOutput:
        from .text import neg_log_floor

        if l_harm is None:
            l_harm = -math.log(p_safe)
        if l_utility is None:
            l_utility = neg_log_floor(utility_score)
        if l_coherence is None:
            l_coherence = neg_log_floor(coherence_score)
        return cls(
            text=text,
            l_harm=l_harm,
            l_utility=l_utility,
            l_coherence=l_coherence,
            l_total=total_loss((l_harm, l_utility, l_coherence), cfg),
            feasible=is_feasible(utility_score, coherence_score, cfg),
            provenance=provenance,
            p_safe=p_safe,
            utility_score=utility_score,
            coherence_score=coherence_score,
        )

    def under(self, cfg: VulnGuardConfig) -> CandidateOutput:
        """Re-derive ``l_total`` and feasibility for another config."""
        return replace(
            self,
            l_total=total_loss((self.l_harm, self.l_utility, self.l_coherence), cfg),
            feasible=is_feasible(self.utility_score, self.coherence_score, cfg),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "text": self.text,
            "l_harm": self.l_harm,
            "l_utility": self.l_utility,
            "l_coherence": self.l_coherence,
            "l_total": self.l_total,
            "feasible": self.feasible,
            "p_safe": self.p_safe,
            "utility_score": self.utility_score,
            "coherence_score": self.coherence_score,
            "provenance": self.provenance.label(),
        }


def is_feasible(utility_score: float, coherence_score: float, cfg: VulnGuardConfig) -> bool:
    return utility_score >= cfg.tau_utility and coherence_score >= cfg.tau_coherence
