"""Gateway configuration: one JSON file, validated up front.

String values may reference environment variables as ``${NAME}``; relative
paths resolve against the config file's directory. Omitted paths fall back to
the data shipped with the package. Every input path must exist, so a bad
config fails before anything binds or runs.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from . import patterns as pattern_repo
from .backend import Backend, HttpBackend, MockBackend
from .core import ParseError, ValidationError, VulnGuardConfig
from .patterns import SnapshotRef
from .pipeline import Pipeline, QuarantineSpool
from .plans import load_plans
from .principles import load_constitution
from .sanitizer import GatePolicy, KeywordMap, Lexicon
from .templates import load_templates
from .text import load_stopwords
from .tools import FixtureFactClient, ToolBroker, ToolSpec
from .trace import TraceStore

_ENV_REF = re.compile(r"\$\{(\w+)\}")

# input files/directories; omitted entries use the shipped data
INPUT_PATHS = ("patterns", "constitution", "plans", "templates", "lexicon", "keywords", "stopwords", "fixtures")
# output directories, created on demand; null keeps everything in memory
OUTPUT_PATHS = ("trace_dir", "spool_dir")

DEFAULT_TOOLS = (
    {"tool_id": "pii_scan", "kind": "pii_scan", "description": "list PII categories and spans in text"},
    {"tool_id": "toxicity", "kind": "toxicity", "description": "harmful-lexicon risk score of text"},
    {"tool_id": "fact_lookup", "kind": "fact_lookup", "description": "look up a fact by key", "fixture": "facts.json"},
)


def data_path(name: str) -> Path:
    return Path(str(resources.files("promptguard").joinpath("data", name)))


_SHIPPED = {
    "patterns": "patterns.jsonl",
    "constitution": "constitution.json",
    "plans": "plans",
    "templates": "templates",
    "lexicon": "lexicon.json",
    "keywords": "keywords.json",
    "stopwords": "stopwords.txt",
    "fixtures": ".",
}


class ConfigError(ValidationError):
    pass


def expand_env(value: Any, environ: Mapping[str, str] | None = None) -> Any:
    env = os.environ if environ is None else environ

    def sub(m: re.Match[str]) -> str:
        name = m.group(1)
        if name not in env:
            raise ConfigError(f"environment variable {name} is not set")
        return env[name]

    if isinstance(value, str):
        return _ENV_REF.sub(sub, value)
    if isinstance(value, list):
        return [expand_env(v, env) for v in value]
    if isinstance(value, dict):
        return {k: expand_env(v, env) for k, v in value.items()}
    return value


@dataclass
class GatewayConfig:
    listen_address: str = "127.0.0.1:8080"
    paths: dict[str, Path | None] = field(default_factory=dict)
    backends: dict[str, dict[str, Any]] = field(default_factory=lambda: {"mock": {"kind": "mock"}})
    default_backend: str = "mock"
    tools: list[dict[str, Any]] = field(default_factory=lambda: [dict(t) for t in DEFAULT_TOOLS])
    policy: GatePolicy = field(default_factory=GatePolicy)
    vulnguard: VulnGuardConfig = field(default_factory=VulnGuardConfig)
    pattern_k: int = 3
    bounds_alpha: float = 0.1
    retries: int = 2
    retry_base_ms: int = 100

    @property
    def host_port(self) -> tuple[str, int]:
        host, _, port = self.listen_address.rpartition(":")
        return host or "127.0.0.1", int(port)

    def path(self, key: str) -> Path | None:
        return self.paths.get(key)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any], base_dir: str | Path = ".", environ: Mapping[str, str] | None = None) -> GatewayConfig:
        if not isinstance(raw, Mapping):
            raise ConfigError("config must be a JSON object")
        raw = expand_env(dict(raw), environ)
        base = Path(base_dir)

        def resolve(p: str) -> Path:
            path = Path(p).expanduser()
            return path if path.is_absolute() else base / path

        given = raw.get("paths") or {}
        if not isinstance(given, dict):
            raise ConfigError("paths must be an object")
        unknown = set(given) - set(INPUT_PATHS) - set(OUTPUT_PATHS)
        if unknown:
            raise ConfigError(f"paths: unknown key(s) {', '.join(sorted(unknown))}")
        paths: dict[str, Path | None] = {}
        for key in INPUT_PATHS:
            path = resolve(given[key]) if given.get(key) else data_path(_SHIPPED[key])
            if not path.exists():
                raise ConfigError(f"paths.{key}: {path} does not exist")
            paths[key] = path
        for key in OUTPUT_PATHS:
            paths[key] = resolve(given[key]) if given.get(key) else None

        backends = raw.get("backends") or {"mock": {"kind": "mock", "script": str(data_path("mock_script.json"))}}
        if not isinstance(backends, dict) or not backends:
            raise ConfigError("backends must be a non-empty object")
        for backend_id, spec in backends.items():
            if not isinstance(spec, dict) or spec.get("kind") not in ("mock", "http"):
                raise ConfigError(f"backends.{backend_id}.kind must be 'mock' or 'http'")
            if spec["kind"] == "mock" and spec.get("script"):
                spec["script"] = str(resolve(spec["script"]))
                if not Path(spec["script"]).exists():
                    raise ConfigError(f"backends.{backend_id}.script: {spec['script']} does not exist")
            if spec["kind"] == "http":
                for key in ("base_url", "model_name"):
                    if not isinstance(spec.get(key), str) or not spec[key]:
                        raise ConfigError(f"backends.{backend_id}.{key} is required")
        default_backend = raw.get("default_backend", next(iter(backends)))
        if default_backend not in backends:
            raise ConfigError(f"default_backend {default_backend!r} is not in backends")

        tools = raw.get("tools", [dict(t) for t in DEFAULT_TOOLS])
        if not isinstance(tools, list):
            raise ConfigError("tools must be a list")

        try:
            policy = GatePolicy(**(raw.get("policy") or {}))
            vulnguard = VulnGuardConfig(**(raw.get("vulnguard") or {}))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

        cfg = cls(
            listen_address=str(raw.get("listen_address", "127.0.0.1:8080")),
            paths=paths,
            backends=backends,
            default_backend=default_backend,
            tools=tools,
            policy=policy,
            vulnguard=vulnguard,
            pattern_k=int(raw.get("pattern_k", 3)),
            bounds_alpha=float(raw.get("bounds_alpha", 0.1)),
            retries=int(raw.get("retries", 2)),
            retry_base_ms=int(raw.get("retry_base_ms", 100)),
        )
        try:
            cfg.host_port
        except ValueError:
            raise ConfigError(f"listen_address {cfg.listen_address!r} must be host:port") from None
        if cfg.pattern_k < 1 or cfg.retries < 0 or cfg.retry_base_ms < 0 or not cfg.bounds_alpha > 0:
            raise ConfigError("pattern_k >= 1, retries >= 0, retry_base_ms >= 0 and bounds_alpha > 0 are required")
        return cfg

    @classmethod
    def load(cls, path: str | Path | None = None, environ: Mapping[str, str] | None = None) -> GatewayConfig:
        if path is None:
            return cls.from_dict({}, environ=environ)
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(raw, base_dir=path.parent, environ=environ)


def build_backend(backend_id: str, spec: Mapping[str, Any]) -> Backend:
    if spec["kind"] == "mock":
        if spec.get("script"):
            return MockBackend.from_file(spec["script"], backend_id)
        if spec.get("rules") is not None:
            return MockBackend.from_rules(spec["rules"], backend_id)
        return MockBackend(backend_id=backend_id)
    return HttpBackend(
        backend_id,
        spec["base_url"],
        spec["model_name"],
        spec.get("api_key_env_var"),
        int(spec.get("timeout_ms", 30000)),
    )


def build_broker(cfg: GatewayConfig, lexicon: Lexicon) -> ToolBroker:
    specs, clients = [], {}
    for i, raw in enumerate(cfg.tools):
        if not isinstance(raw, dict) or not raw.get("tool_id") or not raw.get("kind"):
            raise ConfigError(f"tools[{i}]: needs tool_id and kind")
        fixture = raw.get("fixture_path") or raw.get("fixture")
        fixture_path = None
        if fixture:
            fixture_path = Path(fixture)
            if not fixture_path.is_absolute():
                fixture_path = cfg.paths["fixtures"] / fixture_path
            if not fixture_path.exists():
                raise ConfigError(f"tools[{i}].fixture_path: {fixture_path} does not exist")
        spec = ToolSpec(
            raw["tool_id"], raw["kind"], raw.get("description", ""),
            float(raw.get("timeout_ms", 2000)) / 1000.0, str(fixture_path) if fixture_path else None,
        )
        specs.append(spec)
        if spec.kind == "fact_lookup" and fixture_path is not None:
            clients[spec.tool_id] = FixtureFactClient.load(fixture_path)
    return ToolBroker(specs, lexicon, clients)


def build_pipeline(cfg: GatewayConfig, backends: Mapping[str, Backend] | None = None) -> Pipeline:
    """Load every data file named by ``cfg``; raises on the first bad input."""
    p = cfg.paths
    try:
        lexicon = Lexicon.load(p["lexicon"])
        built = dict(backends) if backends is not None else {
            bid: build_backend(bid, spec) for bid, spec in cfg.backends.items()
        }
        return Pipeline(
            patterns=SnapshotRef(pattern_repo.load(p["patterns"])),
            constitution=SnapshotRef(load_constitution(p["constitution"])),
            lexicon=lexicon,
            keyword_map=KeywordMap.load(p["keywords"]),
            stopwords=load_stopwords(p["stopwords"]),
            templates=load_templates(p["templates"]),
            plans=load_plans(p["plans"]),
            backends=built,
            default_backend=cfg.default_backend if backends is None or cfg.default_backend in built else next(iter(built)),
            broker=build_broker(cfg, lexicon),
            traces=TraceStore(p.get("trace_dir")),
            spool=QuarantineSpool(p.get("spool_dir")),
            policy=cfg.policy,
            cfg=cfg.vulnguard,
            pattern_k=cfg.pattern_k,
            bounds_alpha=cfg.bounds_alpha,
            retries=cfg.retries,
            retry_base_delay=cfg.retry_base_ms / 1000.0,
            patterns_path=p["patterns"],
        )
    except (ParseError, ValidationError) as exc:
        raise ConfigError(str(exc)) from None
