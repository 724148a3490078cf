"""Declarative execution plans."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .core import ParseError, ValidationError

STAGE_KINDS = ("framing", "explore", "verify", "refine", "postvalidate")
REQUIRED_STAGES = ("explore", "refine", "postvalidate")
MAX_BRANCHES = 16
DEFAULT_PLAN_ID = "default"

DEFAULT_LLM_PARAMS: dict[str, dict[str, float | int]] = {
    "framing": {"temperature": 0.3, "max_tokens": 256},
    "explore": {"temperature": 0.8, "max_tokens": 512},
    "verify": {"temperature": 0.0, "max_tokens": 256},
    "refine": {"temperature": 0.5, "max_tokens": 512},
    "postvalidate": {"temperature": 0.0, "max_tokens": 256},
}

# template roles and the stage each belongs to
TEMPLATE_ROLES = {
    "framing": "framing",
    "explore": "explore",
    "react": "verify",
    "critique": "refine",
    "revise": "refine",
    "judge": "postvalidate",
}


@dataclass(frozen=True)
class LlmParams:
    temperature: float
    max_tokens: int


@dataclass(frozen=True)
class StageSpec:
    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ExecutionPlan:
    plan_id: str
    stages: tuple[StageSpec, ...]
    llm_params: Mapping[str, LlmParams]
    templates: Mapping[str, str]
    fragments: tuple[str, ...] = ()

    def stage(self, kind: str) -> StageSpec | None:
        for s in self.stages:
            if s.kind == kind:
                return s
        return None

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(s.kind for s in self.stages)

    def template_for(self, role: str) -> str:
        return self.templates.get(role, role)


def _int_param(params: Mapping[str, Any], key: str, default: int, path: str, lo: int, hi: int | None = None) -> int:
    value = params.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"{path}.{key}: must be an integer")
    if value < lo or (hi is not None and value > hi):
        bound = f"between {lo} and {hi}" if hi is not None else f">= {lo}"
        raise ValidationError(f"{path}.{key}: must be {bound}, got {value}")
    return value


def _stage_params(kind: str, raw: Mapping[str, Any], path: str) -> dict[str, Any]:
    if kind == "explore":
        return {"branch_count": _int_param(raw, "branch_count", 3, path, 1, MAX_BRANCHES)}
    if kind == "refine":
        return {"max_iters": _int_param(raw, "max_iters", 3, path, 1)}
    if kind == "verify":
        tools = raw.get("tools", ["pii_scan", "toxicity"])
        if not isinstance(tools, list) or not all(isinstance(t, str) and t for t in tools):
            raise ValidationError(f"{path}.tools: must be a list of tool ids")
        return {"tools": tuple(tools), "max_steps": _int_param(raw, "max_steps", 4, path, 1)}
    if kind == "postvalidate":
        judge = raw.get("judge", True)
        if not isinstance(judge, bool):
            raise ValidationError(f"{path}.judge: must be a boolean")
        gate = raw.get("judge_gate")
        if gate is not None and (isinstance(gate, bool) or not isinstance(gate, (int, float)) or not 0 <= gate <= 10):
            raise ValidationError(f"{path}.judge_gate: must be a number in [0, 10]")
        return {"judge": judge, "judge_gate": gate}
    return {}


def parse_plan(document: Any) -> ExecutionPlan:
    """Validate a plan document. The reserved id ``default`` yields the built-in plan."""
    if document == DEFAULT_PLAN_ID or (isinstance(document, dict) and document.get("plan_id") == DEFAULT_PLAN_ID):
        return _DEFAULT_PLAN
    if not isinstance(document, dict):
        raise ValidationError("plan: must be a JSON object")
    plan_id = document.get("plan_id")
    if not isinstance(plan_id, str) or not plan_id:
        raise ValidationError("plan.plan_id: must be a non-empty string")
    stages_raw = document.get("stages")
    if not isinstance(stages_raw, list) or not stages_raw:
        raise ValidationError("plan.stages: must be a non-empty list")

    stages: list[StageSpec] = []
    last_rank = -1
    for i, raw in enumerate(stages_raw):
        path = f"plan.stages[{i}]"
        if not isinstance(raw, dict):
            raise ValidationError(f"{path}: must be an object")
        kind = raw.get("kind")
        if kind not in STAGE_KINDS:
            raise ValidationError(f"{path}.kind: unknown stage kind {kind!r}")
        rank = STAGE_KINDS.index(kind)
        if rank == last_rank:
            raise ValidationError(f"{path}.kind: stage {kind!r} appears more than once")
        if rank < last_rank:
            raise ValidationError(f"{path}.kind: stage {kind!r} is out of order; expected order {', '.join(STAGE_KINDS)}")
        last_rank = rank
        merged = dict(raw.get("params") or {})
        merged.update({k: v for k, v in raw.items() if k not in ("kind", "params")})
        stages.append(StageSpec(kind, _stage_params(kind, merged, path)))

    present = {s.kind for s in stages}
    for kind in REQUIRED_STAGES:
        if kind not in present:
            raise ValidationError(f"plan.stages: required stage {kind!r} is missing")

    llm_params: dict[str, LlmParams] = {}
    raw_params = document.get("llm_params") or {}
    if not isinstance(raw_params, dict):
        raise ValidationError("plan.llm_params: must be an object")
    for kind in STAGE_KINDS:
        merged = dict(DEFAULT_LLM_PARAMS[kind])
        given = raw_params.get(kind) or {}
        if not isinstance(given, dict):
            raise ValidationError(f"plan.llm_params.{kind}: must be an object")
        merged.update(given)
        temp = merged["temperature"]
        if isinstance(temp, bool) or not isinstance(temp, (int, float)) or temp < 0:
            raise ValidationError(f"plan.llm_params.{kind}.temperature: must be a real >= 0")
        max_tokens = _int_param(merged, "max_tokens", 256, f"plan.llm_params.{kind}", 1)
        llm_params[kind] = LlmParams(float(temp), max_tokens)
    unknown = set(raw_params) - set(STAGE_KINDS)
    if unknown:
        raise ValidationError(f"plan.llm_params: unknown stage(s) {', '.join(sorted(unknown))}")

    templates = document.get("templates") or {}
    if not isinstance(templates, dict) or not all(isinstance(v, str) for v in templates.values()):
        raise ValidationError("plan.templates: must map roles to template names")
    for role in templates:
        if role not in TEMPLATE_ROLES:
            raise ValidationError(f"plan.templates.{role}: unknown template role")

    fragments = document.get("fragments") or []
    if not isinstance(fragments, list) or not all(isinstance(f, str) for f in fragments):
        raise ValidationError("plan.fragments: must be a list of template names")

    return ExecutionPlan(plan_id, tuple(stages), llm_params, dict(templates), tuple(fragments))


_DEFAULT_PLAN = parse_plan(
    {
        "plan_id": "_builtin",
        "stages": [
            {"kind": "framing"},
            {"kind": "explore", "branch_count": 3},
            {"kind": "verify", "tools": ["pii_scan", "toxicity"]},
            {"kind": "refine", "max_iters": 3},
            {"kind": "postvalidate", "judge": True},
        ],
    }
)
_DEFAULT_PLAN = ExecutionPlan(DEFAULT_PLAN_ID, _DEFAULT_PLAN.stages, _DEFAULT_PLAN.llm_params, {}, ())


def default_plan() -> ExecutionPlan:
    return _DEFAULT_PLAN


def load_plan_file(path: str | Path) -> ExecutionPlan:
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    try:
        return parse_plan(document)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def load_plans(directory: str | Path | None) -> dict[str, ExecutionPlan]:
    """All plans in ``directory`` keyed by id; the reserved default is always present."""
    plans: dict[str, ExecutionPlan] = {}
    if directory is not None:
        for path in sorted(Path(directory).glob("*.json")):
            plan = load_plan_file(path)
            if plan.plan_id == DEFAULT_PLAN_ID:
                continue
            if plan.plan_id in plans:
                raise ValidationError(f"{path}: duplicate plan id {plan.plan_id!r}")
            plans[plan.plan_id] = plan
    plans[DEFAULT_PLAN_ID] = default_plan()
    return plans
