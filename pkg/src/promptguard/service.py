"""HTTP surface of the gateway.

Refusals are ordinary 200 responses with ``refused=true``; error statuses are
reserved for malformed bodies (400), rejected configuration (422) and backend
outages (503).
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any

from fastapi import Body, FastAPI, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, PlainTextResponse
from pydantic import BaseModel, ConfigDict, Field, StrictStr, field_validator

from .bounds import bounds_report
from .core import GenerationRequest, InvalidInputError, ParseError, PopulationId, ValidationError
from .orchestrator import BackendUnavailableError
from .pipeline import Pipeline

logger = logging.getLogger(__name__)


class GenerateBody(BaseModel):
    model_config = ConfigDict(extra="ignore")

    prompt: StrictStr
    population: StrictStr | None = None
    plan_id: StrictStr | None = None
    options: dict[str, Any] = Field(default_factory=dict)

    @field_validator("prompt")
    @classmethod
    def _non_empty(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("prompt must be non-empty")
        return v


class GenerateResponse(BaseModel):
    output: str
    refused: bool
    trace_id: str
    report: dict[str, Any]


class HealthResponse(BaseModel):
    status: str
    pattern_version: int
    constitution_version: str


class ReloadBody(BaseModel):
    path: StrictStr | None = None


class ReloadResponse(BaseModel):
    pattern_version: int
    sizes: dict[str, int]


class BoundsResponse(BaseModel):
    population: str
    pattern_version: int
    dataset_size: int
    alpha: float
    epsilon: float
    safety_bound: float
    convergence_budget: int
    repertoire_budget: int


def _error(status: int, message: str, **extra: Any) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message, **extra})


def create_app(pipeline: Pipeline) -> FastAPI:
    app = FastAPI(title="promptguard gateway", version="0.1.0")
    app.state.pipeline = pipeline

    @app.exception_handler(RequestValidationError)
    async def _bad_body(request: Request, exc: RequestValidationError) -> JSONResponse:
        details = [f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors()]
        return _error(400, "malformed request body", details=details)

    @app.post("/v1/generate", response_model=GenerateResponse)
    def generate(body: GenerateBody) -> Any:
        try:
            population = PopulationId.parse(body.population) if body.population is not None else None
            request = GenerationRequest(body.prompt, population, body.plan_id, body.options)
            result = pipeline.execute(request)
        except BackendUnavailableError as exc:
            return _error(503, f"backend unavailable: {exc}")
        except (ValidationError, InvalidInputError, ParseError) as exc:
            return _error(422, str(exc))
        return GenerateResponse(output=result.output, refused=result.refused, trace_id=result.trace_id, report=result.report)

    @app.get("/v1/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(
            status="ok",
            pattern_version=pipeline.patterns.get().version,
            constitution_version=pipeline.constitution.get().version,
        )

    @app.get("/v1/trace/{trace_id}")
    def trace(trace_id: str) -> Any:
        try:
            body = pipeline.traces.jsonl(trace_id)
        except KeyError:
            return _error(404, f"unknown trace id {trace_id!r}")
        return PlainTextResponse(body, media_type="application/x-ndjson")

    @app.post("/v1/patterns/reload", response_model=ReloadResponse)
    def reload(body: ReloadBody | None = Body(default=None)) -> Any:
        path = Path(body.path) if body and body.path else None
        try:
            snapshot = pipeline.reload_patterns(path)
        except (ValidationError, ParseError, OSError) as exc:
            return _error(422, str(exc), pattern_version=pipeline.patterns.get().version)
        return ReloadResponse(pattern_version=snapshot.version, sizes=snapshot.sizes())

    @app.get("/v1/bounds", response_model=BoundsResponse)
    def bounds(
        population: str = Query(...),
        epsilon: float | None = Query(None),
        alpha: float | None = Query(None),
    ) -> Any:
        try:
            pop = PopulationId.parse(population)
            snapshot = pipeline.patterns.get()
            report = bounds_report(
                len(snapshot.bucket_or_general(pop)),
                pipeline.bounds_alpha if alpha is None else alpha,
                pipeline.cfg.epsilon if epsilon is None else epsilon,
            )
        except InvalidInputError as exc:
            return _error(422, str(exc))
        return BoundsResponse(population=pop.value, pattern_version=snapshot.version, **report)

    return app
