"""End-to-end request execution over shared, swappable snapshots."""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import patterns as pattern_repo
from .backend import Backend
from .bounds import bounds_report
from .core import (
    CandidateOutput,
    GenerationRequest,
    InvalidInputError,
    PopulationId,
    ValidationError,
    VulnGuardConfig,
)
from .orchestrator import BackendUnavailableError, resolve_budget, run_explore, run_framing, run_refine
from .patterns import RepositorySnapshot, SnapshotRef
from .plans import DEFAULT_PLAN_ID, MAX_BRANCHES, ExecutionPlan
from .principles import Constitution, principles_for, render_rubric
from .sanitizer import GatePolicy, KeywordMap, Lexicon, PiiDetector, gate, redact, scan_pii, strip_masks
from .templates import render
from .tools import ToolBroker, run_react_loop
from .trace import TraceStore, Tracer
from .validator import (
    MetricPlugin,
    ValidationReport,
    judge_gate,
    parse_constraints,
    parse_judge,
    select_consistent,
    validate,
)
from .vulnguard import CandidateScorer, HarmScorer, assemble_prompt

logger = logging.getLogger(__name__)


class QuarantineSpool:
    """Requests held for human review. Only sanitized text is ever written."""

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory is not None else None
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
        self.entries: list[dict[str, Any]] = []
        self._lock = threading.Lock()

    def put(self, entry: dict[str, Any]) -> None:
        with self._lock:
            self.entries.append(entry)
            if self.directory is not None:
                with open(self.directory / "quarantine.jsonl", "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")


@dataclass
class PipelineResult:
    output: str
    refused: bool
    trace_id: str
    report: dict[str, Any]
    validation: ValidationReport | None = None
    final: CandidateOutput | None = None


@dataclass
class Pipeline:
    patterns: SnapshotRef[RepositorySnapshot]
    constitution: SnapshotRef[Constitution]
    lexicon: Lexicon
    keyword_map: KeywordMap
    stopwords: frozenset[str]
    templates: Mapping[str, str]
    plans: Mapping[str, ExecutionPlan]
    backends: Mapping[str, Backend]
    default_backend: str
    broker: ToolBroker
    traces: TraceStore = field(default_factory=TraceStore)
    spool: QuarantineSpool = field(default_factory=QuarantineSpool)
    policy: GatePolicy = field(default_factory=GatePolicy)
    cfg: VulnGuardConfig = field(default_factory=VulnGuardConfig)
    harm_scorer: HarmScorer | None = None
    detector: PiiDetector | None = None
    plugins: Sequence[MetricPlugin] = ()
    pattern_k: int = 3
    bounds_alpha: float = 0.1
    retries: int = 2
    retry_base_delay: float = 0.1
    patterns_path: str | Path | None = None

    def __post_init__(self) -> None:
        if self.default_backend not in self.backends:
            raise ValidationError(f"default backend {self.default_backend!r} is not registered")

    # -- snapshot management -------------------------------------------------

    def reload_patterns(self, path: str | Path | None = None) -> RepositorySnapshot:
        path = path or self.patterns_path
        if path is None:
            raise ValidationError("no pattern file configured")
        return self.patterns.swap(lambda current: pattern_repo.reload(path, current))

    # -- request resolution --------------------------------------------------

    def resolve(self, request: GenerationRequest) -> tuple[ExecutionPlan, VulnGuardConfig, Backend]:
        """Configuration checks that must fail before any work is done."""
        plan_id = request.plan_id or DEFAULT_PLAN_ID
        plan = self.plans.get(plan_id)
        if plan is None:
            raise ValidationError(f"unknown plan_id {plan_id!r}")
        try:
            cfg = self.cfg.with_overrides(request.options)
        except (InvalidInputError, TypeError) as exc:
            raise ValidationError(f"invalid options: {exc}") from None
        if "num_candidates" in request.options and cfg.num_candidates > MAX_BRANCHES:
            raise ValidationError(f"options.num_candidates must be <= {MAX_BRANCHES}")
        parse_constraints(request.options)
        backend_id = request.options.get("backend_id", self.default_backend)
        backend = self.backends.get(backend_id)
        if backend is None:
            raise ValidationError(f"unknown backend_id {backend_id!r}")
        for role in ("framing", "explore", "react", "critique", "revise", "judge"):
            name = plan.template_for(role)
            if name not in self.templates:
                raise ValidationError(f"plan {plan.plan_id!r}: template {name!r} not found")
        for name in plan.fragments:
            if name not in self.templates:
                raise ValidationError(f"plan {plan.plan_id!r}: fragment {name!r} not found")
        return plan, cfg, backend

    # -- execution -----------------------------------------------------------

    def execute(self, request: GenerationRequest) -> PipelineResult:
        plan, cfg, backend = self.resolve(request)
        snapshot = self.patterns.get()
        constitution = self.constitution.get()
        tracer = Tracer(self.traces, retries=self.retries, base_delay=self.retry_base_delay)

        sanitized = gate(request.prompt, self.policy, self.lexicon, self.keyword_map, request.population_hint, self.detector)
        population = sanitized.population
        tracer.record(
            "gate", 0, "gate", prompt_text=sanitized.clean_text,
            verdict=sanitized.verdict, risk_score=sanitized.risk_score,
            population=population.value, pii=[m.to_dict(include_surface=False) for m in sanitized.matches],
        )
        report: dict[str, Any] = {
            "request_id": request.request_id,
            "trace_id": tracer.trace_id,
            "plan_id": plan.plan_id,
            "backend_id": backend.backend_id,
            "population": population.value,
            "population_confidence": sanitized.population_confidence,
            "verdict": sanitized.verdict,
            "risk_score": sanitized.risk_score,
            "pii_redacted": len(sanitized.matches),
            "pattern_version": snapshot.version,
            "constitution_version": constitution.version,
            "config": cfg.to_dict(),
            "stages": {},
            "bounds": bounds_report(len(snapshot.bucket_or_general(population)), self.bounds_alpha, cfg.epsilon),
        }
        refusal_text = constitution.refusal_for(population)

        if sanitized.verdict in ("quarantine", "reject"):
            if sanitized.verdict == "quarantine":
                self.spool.put({
                    "request_id": request.request_id,
                    "trace_id": tracer.trace_id,
                    "clean_text": sanitized.clean_text,
                    "risk_score": sanitized.risk_score,
                    "population": population.value,
                })
            report["selection"] = {"reason": f"gate-{sanitized.verdict}"}
            return PipelineResult(refusal_text, True, tracer.trace_id, report)

        query = sanitized.clean_text
        principles = principles_for(constitution, population)
        patterns = pattern_repo.select_contrastive(snapshot, population, query, self.pattern_k)
        report["pattern_ids"] = [p.id for p in patterns]
        vg = assemble_prompt(query, population, patterns, principles)
        scorer = CandidateScorer(snapshot, population, strip_masks(query), cfg, self.stopwords, self.harm_scorer)
        masked_outputs = 0

        def score(text: str, stage: str, iteration: int) -> CandidateOutput:
            # backend text is masked on entry so no later prompt can carry PII out
            nonlocal masked_outputs
            found = scan_pii(text)
            if found:
                masked_outputs += len(found)
                text = redact(text, found, "mask")
            return scorer(text, stage, iteration)

        stages = report["stages"]

        guidelines = ""
        if plan.stage("framing"):
            guidelines = run_framing(
                query, population, principles, backend, tracer,
                self.templates[plan.template_for("framing")], plan.llm_params["framing"],
            )
            stages["framing"] = {"status": "ok" if guidelines else "degraded", "guidelines": guidelines}
        rubric = render_rubric(principles, guidelines)

        branch_count = resolve_budget(request, plan, "branch_count", "num_candidates", "explore")
        fragments = "\n".join(self.templates[name].strip() for name in plan.fragments)
        candidates = run_explore(
            vg, branch_count, backend, score, tracer,
            self.templates[plan.template_for("explore")], plan.llm_params["explore"], fragments,
        )
        reports = [validate(c, request, principles, cfg, self.lexicon, self.plugins) for c in candidates]
        chosen = select_consistent(list(zip(candidates, reports)), cfg, refusal_text)
        stages["explore"] = {
            "status": "ok" if len(candidates) == branch_count else "partial",
            "branches": branch_count,
            "candidates": len(candidates),
            "selected": chosen.candidate.provenance.label(),
            "fallback": chosen.fallback,
        }
        current = chosen.candidate

        verify = plan.stage("verify")
        if verify:
            summary = run_react_loop(
                current.text, verify.params["tools"], self.broker, backend,
                max_steps=verify.params["max_steps"],
                template=self.templates[plan.template_for("react")],
                on_call=lambda step, prompt, response, error: tracer.record(
                    "verify", step, "call" if error is None else "failure", prompt, response or "",
                    backend.backend_id, **({"error": error} if error else {}),
                ),
                retries=self.retries,
                base_delay=self.retry_base_delay,
            )
            tracer.backend_calls += summary.backend_calls
            tracer.record("verify", verify.params["max_steps"] + 1, "verify", scores={"toxicity": summary.toxicity}, **summary.to_dict())
            stages["verify"] = {"status": "degraded" if summary.degraded else "ok", **summary.to_dict()}

        max_iters = resolve_budget(request, plan, "max_iters", "max_refine_iters", "refine")
        refined = run_refine(
            current, rubric, max_iters, cfg, backend, score, tracer,
            self.templates[plan.template_for("critique")], self.templates[plan.template_for("revise")],
            plan.llm_params["refine"],
        )
        stages["refine"] = {
            "status": "degraded" if refined.degraded else "ok",
            "iterations": refined.iterations,
            "accepted_totals": refined.accepted_totals,
            "stop_reason": refined.stop_reason,
        }
        final = refined.candidate

        post = plan.stage("postvalidate")
        assert post is not None
        validation = validate(final, request, principles, cfg, self.lexicon, self.plugins)
        if post.params["judge"]:
            params = plan.llm_params["postvalidate"]
            prompt = render(self.templates[plan.template_for("judge")], rubric=rubric, candidate=final.text)
            try:
                response = tracer.call("postvalidate", 1, backend, prompt, params.temperature, params.max_tokens, step="judge").text
                verdict = parse_judge(response)
            except Exception as exc:  # judge is advisory; never fail the request on it
                verdict = None
                validation.notes.append(f"judge unavailable: {exc}")
            if verdict is not None:
                validation.judge_score = verdict.score
                if verdict.note:
                    validation.notes.append(verdict.note)
                if post.params["judge_gate"] is not None:
                    validation.set_verdict("judge", judge_gate(verdict, post.params["judge_gate"]))
        tracer.record("postvalidate", 2, "validate", scores=validation.to_dict())
        stages["postvalidate"] = {"status": "ok"}

        selection = select_consistent([(final, validation)], cfg, refusal_text)
        output = selection.output
        if not selection.refused and validation.pii_leakage_count:
            output = redact(output, scan_pii(output), "mask")
            validation.notes.append("output redacted: PII detected at post-validation")
        report["selection"] = {"reason": selection.reason, "fallback": selection.fallback}
        report["validation"] = validation.to_dict()
        report["backend_calls"] = tracer.backend_calls
        report["pii_masked_in_outputs"] = masked_outputs
        return PipelineResult(output, selection.refused, tracer.trace_id, report, validation, final)


__all__ = ["Pipeline", "PipelineResult", "QuarantineSpool", "BackendUnavailableError", "PopulationId"]
