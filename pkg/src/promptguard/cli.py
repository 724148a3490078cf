"""Command-line entry point.

Exit codes: 0 success, 1 configuration or validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Any, Sequence

from . import patterns as pattern_repo
from .bounds import bounds_report
from .config import ConfigError, GatewayConfig, build_pipeline
from .core import GenerationRequest, InvalidInputError, ParseError, PopulationId, PromptGuardError, ValidationError
from .evaluation import MODES, evaluate, read_corpus
from .orchestrator import BackendUnavailableError
from .sanitizer import gate

logger = logging.getLogger("promptguard")

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 1, 2


def _emit(obj: Any) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _config(args: argparse.Namespace) -> GatewayConfig:
    # --config may come before or after the subcommand
    return GatewayConfig.load(getattr(args, "config", None))


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    cfg = _config(args)
    pipeline = build_pipeline(cfg)  # every path is checked before binding
    host, port = cfg.host_port
    uvicorn.run(create_app(pipeline), host=args.host or host, port=args.port or port, log_level="info")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    body = {"prompt": args.prompt, "plan_id": args.plan}
    if args.population:
        body["population"] = args.population
    if args.server:
        import httpx

        try:
            resp = httpx.post(args.server.rstrip("/") + "/v1/generate", json=body, timeout=60.0)
        except httpx.HTTPError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        _emit(resp.json())
        return EXIT_OK if resp.status_code == 200 else EXIT_CONFIG
    pipeline = build_pipeline(_config(args))
    request = GenerationRequest(args.prompt, PopulationId.parse(args.population) if args.population else None, args.plan)
    try:
        result = pipeline.execute(request)
    except BackendUnavailableError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    _emit({"output": result.output, "refused": result.refused, "trace_id": result.trace_id, "report": result.report})
    return EXIT_OK


def cmd_sanitize(args: argparse.Namespace) -> int:
    """One prompt per line (plain text or a JSON object with "prompt"); JSONL out."""
    pipeline = build_pipeline(_config(args))
    lines = Path(args.input).read_text(encoding="utf-8").splitlines()
    out = sys.stdout
    for line in lines:
        if not line.strip():
            continue
        prompt, hint = line, None
        if line.lstrip().startswith("{"):
            try:
                data = json.loads(line)
                prompt = data["prompt"]
                hint = PopulationId.parse(data["population"]) if data.get("population") else None
            except (json.JSONDecodeError, KeyError, TypeError):
                pass
        result = gate(prompt, pipeline.policy, pipeline.lexicon, pipeline.keyword_map, hint, pipeline.detector)
        out.write(json.dumps(result.to_dict(), sort_keys=True) + "\n")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    pipeline = build_pipeline(_config(args))
    requests = read_corpus(args.corpus)
    if args.backend is not None and args.backend not in pipeline.backends:
        raise ConfigError(f"unknown backend {args.backend!r}")
    if args.plan is not None and args.plan not in pipeline.plans:
        raise ConfigError(f"unknown plan {args.plan!r}")
    report = evaluate(pipeline, requests, args.mode, args.backend, args.plan)
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    _emit(report["aggregate"])
    return EXIT_OK


def cmd_bounds(args: argparse.Namespace) -> int:
    cfg = _config(args)
    snapshot = pattern_repo.load(cfg.paths["patterns"])
    population = PopulationId.parse(args.population)
    report = bounds_report(
        len(snapshot.bucket_or_general(population)),
        cfg.bounds_alpha if args.alpha is None else args.alpha,
        cfg.vulnguard.epsilon if args.epsilon is None else args.epsilon,
    )
    _emit({"population": population.value, **report})
    return EXIT_OK


def cmd_sync(args: argparse.Namespace) -> int:
    """Merge every pattern JSONL under a local tree into the configured pattern file."""
    cfg = _config(args)
    source = Path(args.source)
    if not source.is_dir():
        raise FileNotFoundError(f"{source} is not a directory")
    files = sorted(source.rglob("*.jsonl"))
    if not files:
        raise ValidationError(f"no *.jsonl pattern files under {source}")
    lines: list[str] = []
    for path in files:
        parsed = pattern_repo.parse_patterns(path.read_text(encoding="utf-8").splitlines(), str(path))
        lines += [json.dumps(p.to_dict(), sort_keys=True) for p in parsed]
    target = Path(args.to) if args.to else cfg.paths["patterns"]
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=".sync-", suffix=".jsonl")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    try:
        snapshot = pattern_repo.load(tmp)  # full validation, duplicates included
    except PromptGuardError:
        os.unlink(tmp)
        raise
    os.replace(tmp, target)
    _emit({"target": str(target), "files": len(files), "sizes": snapshot.sizes()})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="gateway config JSON (defaults to shipped data)")

    parser = argparse.ArgumentParser(prog="promptguard", description="Safety gateway for text-generation backends", parents=[common])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", parents=[common], help="run the HTTP service")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("run", parents=[common], help="execute one request")
    p.add_argument("--plan", default="default")
    p.add_argument("--prompt", required=True)
    p.add_argument("--population")
    p.add_argument("--server", help="send the request to a running service instead")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sanitize", parents=[common], help="run the input gate over a file of prompts")
    p.add_argument("--in", dest="input", required=True)
    p.set_defaults(func=cmd_sanitize)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a JSONL request corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--mode", choices=MODES, default="full")
    p.add_argument("--out", required=True)
    p.add_argument("--plan")
    p.add_argument("--backend")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bounds", parents=[common], help="theoretical bounds for a population")
    p.add_argument("--population", required=True)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("sync", parents=[common], help="ingest pattern files from a local directory tree")
    p.add_argument("--from", dest="source", required=True)
    p.add_argument("--to", help="target pattern file (defaults to the configured one)")
    p.set_defaults(func=cmd_sync)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValidationError, InvalidInputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ParseError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
