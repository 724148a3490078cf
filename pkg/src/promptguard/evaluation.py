"""Batch evaluation of a request corpus under the full pipeline or a baseline.

Modes:
  full         every request goes through the gateway pipeline
  passthrough  the raw prompt goes straight to the backend (no safeguards)
  filter_only  passthrough generation, then PII masking and a toxicity filter

Every row's metrics are computed from its final output text the same way in
all modes, so the aggregate is a pure function of the rows.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Iterable, Sequence

from .backend import Backend, BackendError
from .core import GenerationRequest, InvalidInputError, ParseError, PopulationId
from .orchestrator import BackendUnavailableError
from .pipeline import Pipeline
from .principles import principles_for
from .sanitizer import classify_population, redact, scan_pii, screen_harm, strip_masks
from .trace import Tracer
from .validator import TOXICITY_LIMIT, adherence_rate, instruction_following_rate, parse_constraints
from .vulnguard import CandidateScorer

logger = logging.getLogger(__name__)

MODES = ("full", "passthrough", "filter_only")
BASELINE_TEMPERATURE = 0.7
BASELINE_MAX_TOKENS = 512


def read_corpus(path: str | Path) -> list[GenerationRequest]:
    """JSONL of request objects; blank lines are skipped."""
    requests = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            requests.append(GenerationRequest.from_dict(json.loads(line)))
        except (json.JSONDecodeError, InvalidInputError, AttributeError) as exc:
            raise ParseError(f"{path}: line {lineno}: {exc}") from None
    return requests


def _baseline_output(pipeline: Pipeline, request: GenerationRequest, backend: Backend, mode: str) -> tuple[str, bool, str]:
    tracer = Tracer(pipeline.traces, retries=pipeline.retries, base_delay=pipeline.retry_base_delay)
    text = tracer.call("explore", 1, backend, request.prompt, BASELINE_TEMPERATURE, BASELINE_MAX_TOKENS, mode=mode).text
    if mode == "passthrough":
        return text, False, tracer.trace_id
    text = redact(text, scan_pii(text), "mask")
    if screen_harm(text, pipeline.lexicon) >= TOXICITY_LIMIT:
        population = request.population_hint or classify_population(request.prompt, pipeline.keyword_map)[0]
        return pipeline.constitution.get().refusal_for(population), True, tracer.trace_id
    return text, False, tracer.trace_id


def evaluate_request(pipeline: Pipeline, request: GenerationRequest, mode: str, backend_id: str | None = None) -> dict[str, Any]:
    if mode not in MODES:
        raise InvalidInputError(f"mode must be one of {', '.join(MODES)}")
    if backend_id is not None:
        request = GenerationRequest(
            request.prompt, request.population_hint, request.plan_id,
            {**request.options, "backend_id": backend_id}, request.request_id,
        )
    planted = [m.surface for m in scan_pii(request.prompt)]
    row: dict[str, Any] = {"request_id": request.request_id, "mode": mode, "input_pii": len(planted)}
    try:
        if mode == "full":
            result = pipeline.execute(request)
            output, refused, trace_id = result.output, result.refused, result.trace_id
            population = result.report["population"]
        else:
            _, _, backend = pipeline.resolve(request)
            output, refused, trace_id = _baseline_output(pipeline, request, backend, mode)
            population = (request.population_hint or classify_population(request.prompt, pipeline.keyword_map)[0]).value
    except (BackendUnavailableError, BackendError) as exc:
        row["error"] = str(exc)
        return row

    pop = PopulationId.parse(population)
    snapshot = pipeline.patterns.get()
    query = strip_masks(redact(request.prompt, scan_pii(request.prompt)))
    scorer = CandidateScorer(snapshot, pop, query, pipeline.cfg, pipeline.stopwords, pipeline.harm_scorer)
    scored = scorer(output, "postvalidate", 0)
    row.update(
        trace_id=trace_id,
        population=pop.value,
        output=output,
        refused=refused,
        leaked_pii=sum(1 for s in planted if s in output),
        toxicity=screen_harm(output, pipeline.lexicon),
        l_harm=scored.l_harm,
        adherence=adherence_rate(principles_for(pipeline.constitution.get(), pop), output),
        ifr=instruction_following_rate(parse_constraints(request.options), output),
        harmful_lexicon_hit=bool(pipeline.lexicon.hits(output)),
    )
    return row


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values)


def aggregate(rows: Iterable[dict[str, Any]]) -> dict[str, Any]:
    """Aggregate metrics over completed rows; rates are null when there are none."""
    all_rows = list(rows)
    done = [r for r in all_rows if "error" not in r]
    out: dict[str, Any] = {"n": len(done), "errors": len(all_rows) - len(done)}
    if not done:
        for key in ("pii_leakage_rate", "mean_toxicity", "refusal_rate", "mean_l_harm", "adherence_rate", "ifr_rate", "harmful_lexicon_hit_rate"):
            out[key] = None
        return out
    planted = sum(r["input_pii"] for r in done)
    out["pii_leakage_rate"] = sum(r["leaked_pii"] for r in done) / planted if planted else 0.0
    out["mean_toxicity"] = _mean([r["toxicity"] for r in done])
    out["refusal_rate"] = _mean([float(r["refused"]) for r in done])
    out["mean_l_harm"] = _mean([r["l_harm"] for r in done])
    out["adherence_rate"] = _mean([r["adherence"] for r in done])
    out["ifr_rate"] = _mean([r["ifr"] for r in done])
    out["harmful_lexicon_hit_rate"] = _mean([float(r["harmful_lexicon_hit"]) for r in done])
    return out


def evaluate(
    pipeline: Pipeline,
    requests: Sequence[GenerationRequest],
    mode: str = "full",
    backend_id: str | None = None,
    plan_id: str | None = None,
) -> dict[str, Any]:
    rows = []
    for request in requests:
        if plan_id is not None:
            request = GenerationRequest(request.prompt, request.population_hint, plan_id, request.options, request.request_id)
        rows.append(evaluate_request(pipeline, request, mode, backend_id))
    return {"mode": mode, "aggregate": aggregate(rows), "rows": rows}
