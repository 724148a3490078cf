"""Stage runners for the staged generation plan.

framing -> explore -> (verify) -> refine -> postvalidate, each stage traced.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .backend import Backend, BackendError
from .core import CandidateOutput, GenerationRequest, PopulationId, PromptGuardError, VulnGuardConfig
from .plans import ExecutionPlan, LlmParams
from .principles import Principle, render_persona
from .templates import render
from .trace import Tracer
from .vulnguard import VulnGuardPrompt

logger = logging.getLogger(__name__)

ScoreFn = Callable[[str, str, int], CandidateOutput]


class StageError(PromptGuardError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


class BackendUnavailableError(StageError):
    """No candidate could be generated; the request cannot be served."""


def _candidate_scores(c: CandidateOutput) -> dict:
    out = c.to_dict()
    out.pop("text")
    return out


def run_framing(
    sanitized_query: str,
    population: PopulationId,
    principles: Sequence[Principle],
    backend: Backend,
    tracer: Tracer,
    template: str,
    params: LlmParams,
) -> str:
    """Ask for task-specific guidelines; returns "" when the backend fails."""
    prompt = render(
        template,
        population=population.display_name,
        principles="\n".join(f"- {p.text}" for p in principles) or "- (none)",
        persona=render_persona(list(principles)) or "(none)",
        query=sanitized_query,
    )
    try:
        return tracer.call("framing", 0, backend, prompt, params.temperature, params.max_tokens).text.strip()
    except BackendError as exc:
        logger.warning("framing degraded: %s", exc)
        return ""


def run_explore(
    vulnguard_prompt: VulnGuardPrompt,
    branch_count: int,
    backend: Backend,
    score: ScoreFn,
    tracer: Tracer,
    template: str,
    params: LlmParams,
    fragments: str = "",
) -> list[CandidateOutput]:
    if branch_count < 1:
        raise ValueError("branch_count must be >= 1")
    candidates: list[CandidateOutput] = []
    for branch in range(1, branch_count + 1):
        prompt = render(template, vulnguard_prompt=vulnguard_prompt.rendered, fragments=fragments, branch=branch)
        try:
            done = tracer.call("explore", branch, backend, prompt, params.temperature, params.max_tokens)
        except BackendError:
            continue
        candidate = score(done.text, "explore", branch)
        tracer.record("explore", branch, "score", backend_id=backend.backend_id, scores=_candidate_scores(candidate))
        candidates.append(candidate)
    if not candidates:
        raise BackendUnavailableError("explore", f"all {branch_count} branches failed")
    return candidates


@dataclass
class RefineResult:
    candidate: CandidateOutput
    iterations: int
    accepted_totals: list[float] = field(default_factory=list)
    stop_reason: str = ""
    degraded: bool = False


def run_refine(
    best: CandidateOutput,
    rubric: str,
    max_iters: int,
    cfg: VulnGuardConfig,
    backend: Backend,
    score: ScoreFn,
    tracer: Tracer,
    critique_template: str,
    revise_template: str,
    params: LlmParams,
) -> RefineResult:
    """Critique-and-revise loop that only accepts strict ``l_total`` improvements."""
    current = best
    result = RefineResult(current, 0, [current.l_total])
    while True:
        if current.l_harm <= cfg.epsilon:
            result.stop_reason = "converged"
            break
        if result.iterations >= max_iters:
            result.stop_reason = "max_iters"
            break
        result.iterations += 1
        i = result.iterations
        try:
            critique = tracer.call(
                "refine", i, backend,
                render(critique_template, rubric=rubric, candidate=current.text),
                params.temperature, params.max_tokens, step="critique",
            ).text
            revised_text = tracer.call(
                "refine", i, backend,
                render(revise_template, rubric=rubric, candidate=current.text, critique=critique),
                params.temperature, params.max_tokens, step="revise",
            ).text
        except BackendError:
            result.degraded = True
            result.stop_reason = "backend_error"
            break
        revised = score(revised_text, "refine", i)
        accepted = revised.l_total < current.l_total
        tracer.record("refine", i, "score", backend_id=backend.backend_id, scores=_candidate_scores(revised), accepted=accepted)
        if not accepted:
            result.stop_reason = "no_improvement"
            break
        current = revised
        result.accepted_totals.append(current.l_total)
    result.candidate = current
    return result


def resolve_budget(request: GenerationRequest, plan: ExecutionPlan, key: str, option: str, stage: str) -> int:
    """Request option beats the plan's stage parameter."""
    if option in request.options:
        return int(request.options[option])
    spec = plan.stage(stage)
    assert spec is not None
    return int(spec.params[key])
