"""Command-line entry point.

Exit codes: 0 success or clean result, 1 validation issues or a failed score
threshold, 2 usage or input error, 3 backend error.

Settings shared by several subcommands (backend, cassette, cache, pricing,
url, model, schema_set, timestamp) resolve in this order: command-line flag,
environment variable ``LEGACY2CACAO_<NAME>``, ``--config`` JSON file, built-in
default.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from .backend import (
    DEFAULT_MODEL,
    BackendError,
    CachingBackend,
    Cassette,
    PricingConfig,
    RecordingBackend,
    RemoteBackend,
    ReplayBackend,
    UnknownModelPrice,
    usage_report,
)
from .ingest import IngestError, load_legacy, load_manifest
from .metrics import evaluate_pair
from .model import PlaybookError, parse_playbook
from .pipeline import (
    FIXED_TIMESTAMP,
    PipelineError,
    TransformConfig,
    TransformResult,
    refine,
    transform,
)
from .prompts import PatternSet, PromptError
from .validation import avg_syn_err, format_avg, validate

log = logging.getLogger("legacy2cacao")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_BACKEND = 0, 1, 2, 3
ENV_PREFIX = "LEGACY2CACAO_"
DEFAULTS: dict[str, Any] = {
    "backend": "replay",
    "cassette": None,
    "cache": None,
    "pricing": None,
    "url": None,
    "model": DEFAULT_MODEL,
    "schema_set": "patched",
    "timestamp": None,
}
PRESETS = ("baseline", "all", "all-no-oneshot")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------- config


class Settings:
    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file: dict[str, Any] = {}
        if getattr(args, "config", None):
            try:
                self.file = json.loads(Path(args.config).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise UsageError(f"cannot read config {args.config}: {exc}") from None
            if not isinstance(self.file, dict):
                raise UsageError("config file must hold a JSON object")

    def get(self, name: str) -> Any:
        flag = getattr(self.args, name, None)
        if flag is not None:
            return flag
        env = os.environ.get(ENV_PREFIX + name.upper())
        if env is not None:
            return env
        if name in self.file:
            return self.file[name]
        return DEFAULTS.get(name)


def _pricing(settings: Settings) -> PricingConfig | None:
    path = settings.get("pricing")
    if path is None:
        return None
    try:
        return PricingConfig.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read pricing {path}: {exc}") from None


def _backend(settings: Settings, record_to: str | None = None):
    kind = settings.get("backend")
    cassette = settings.get("cassette")
    if record_to is not None:
        kind = "remote"
    if kind == "replay":
        if cassette is None:
            raise UsageError("--backend replay needs --cassette")
        try:
            return ReplayBackend.from_file(cassette)
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot load cassette {cassette}: {exc}") from None
    url = settings.get("url")
    if kind == "cache-through":
        cache = settings.get("cache")
        if cache is None:
            raise UsageError("--backend cache-through needs --cache")
        return CachingBackend(RemoteBackend(url) if url else None, cache)
    if kind != "remote":
        raise UsageError(f"unknown backend {kind!r}")
    if not url:
        raise UsageError("remote backend needs --url")
    inner = RemoteBackend(url)
    if record_to is not None:
        return RecordingBackend(inner, record_to)
    return inner


def _config(settings: Settings, args: argparse.Namespace, patterns: PatternSet | None = None) -> TransformConfig:
    timestamp = settings.get("timestamp")
    if timestamp is None and (settings.get("backend") != "remote" or getattr(args, "command", "") == "record"):
        timestamp = FIXED_TIMESTAMP
    try:
        return TransformConfig(
            patterns=patterns or PatternSet.parse(getattr(args, "patterns", None) or "all"),
            decompose=not getattr(args, "no_decompose", False),
            max_refine_iterations=getattr(args, "max_refine", 5),
            ged_edge_mode=getattr(args, "edge_mode", None) or "all",
            model_id=settings.get("model"),
            schema_set=settings.get("schema_set"),
            timestamp=timestamp,
            pricing=_pricing(settings),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# --------------------------------------------------------------------- output


def _write(text: str, path: str | None) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _emit_json(obj: Any, path: str | None = None) -> None:
    _write(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", path)


def _read(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8-sig")
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror or exc}") from None


def _load_playbook(path: str):
    try:
        return parse_playbook(_read(path))
    except PlaybookError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _notes(args: argparse.Namespace) -> str | None:
    return _read(args.notes) if getattr(args, "notes", None) else None


def _result_summary(result: TransformResult, output: str | None) -> dict[str, Any]:
    trace = result.trace_dict()
    return {
        "output": output,
        "syntax_err_count": result.validation.syntax_err_count,
        "validation": trace["validation"],
        "refinement_trace": trace["refinement_trace"],
        "completions": trace["completions"],
        "usage": trace["usage"],
    }


def _human_issues(report) -> str:
    lines = [f"{report.syntax_err_count} issues"]
    lines += ["  " + m for m in report.messages()]
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------- commands


def cmd_validate(args: argparse.Namespace, settings: Settings) -> int:
    schema_set = settings.get("schema_set")
    reports = {p: validate(_read(p), schema_set) for p in args.paths}
    if args.json:
        _emit_json({
            "schema_set": schema_set,
            "files": {p: r.to_dict() for p, r in reports.items()},
            "avg_syn_err": format_avg(avg_syn_err(list(reports.values()))),
        }, args.out)
    else:
        for path, report in reports.items():
            prefix = f"{path}: " if len(reports) > 1 else ""
            sys.stdout.write(prefix + _human_issues(report))
        if len(reports) > 1:
            print(f"avg_syn_err: {format_avg(avg_syn_err(list(reports.values())))}")
    return EXIT_OK if all(r.ok for r in reports.values()) else EXIT_FAIL


def _transform_outputs(args, inputs) -> list[str | None]:
    if len(inputs) == 1:
        return [args.out]
    if not args.out:
        raise UsageError("several inputs need --out <directory>")
    return [str(Path(args.out) / f"{Path(p).name.split('.')[0]}.cacao.json") for p in inputs]


def cmd_transform(args: argparse.Namespace, settings: Settings) -> int:
    cfg = _config(settings, args)
    backend = _backend(settings, settings.get("cassette") if args.command == "record" else None)
    outputs = _transform_outputs(args, args.input)
    legacies = [load_legacy(p) for p in args.input]
    notes = _notes(args)

    def run(i: int) -> TransformResult:
        return transform(legacies[i], cfg, backend, analyst_notes=notes)

    if args.jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(run, range(len(legacies))))
    else:
        results = [run(i) for i in range(len(legacies))]

    summaries = []
    for path, out, result in zip(args.input, outputs, results):
        if out or not args.json:
            _write(result.playbook_text, out)
        summaries.append({"input": path, **_result_summary(result, out)})
        if args.trace:
            trace_path = args.trace if len(results) == 1 else str(Path(args.trace) / f"{Path(path).name.split('.')[0]}.trace.json")
            _emit_json(result.trace_dict(), trace_path)
        if not args.json:
            log.info("%s: %d issues after %d refinement rounds", path,
                     result.validation.syntax_err_count, len(result.refinement_trace) - 1)
    if args.json:
        payload = summaries[0] if len(summaries) == 1 else {"results": summaries}
        _emit_json(payload)
    elif any(out for out in outputs):
        for s in summaries:
            print(f"{s['input']}: {s['syntax_err_count']} issues -> {s['output']}", file=sys.stderr)
    return EXIT_OK if all(r.validation.ok for r in results) else EXIT_FAIL


def cmd_refine(args: argparse.Namespace, settings: Settings) -> int:
    cfg = _config(settings, args)
    backend = _backend(settings)
    legacy = load_legacy(args.input)
    candidate = _read(args.candidate)
    review = None
    if args.interactive_review:
        def review(iteration, report):
            sys.stderr.write(f"-- iteration {iteration}: {report.syntax_err_count} issues\n")
            for m in report.messages():
                sys.stderr.write(f"   {m}\n")
            sys.stderr.write("analyst notes (blank line to continue): ")
            sys.stderr.flush()
            line = sys.stdin.readline().strip()
            return line or None
    result = refine(legacy, candidate, None, cfg, backend, analyst_notes=_notes(args), review=review)
    if args.out or not args.json:
        _write(result.playbook_text, args.out)
    if args.trace:
        _emit_json(result.trace_dict(), args.trace)
    if args.json:
        _emit_json({"input": args.input, **_result_summary(result, args.out)})
    return EXIT_OK if result.validation.ok else EXIT_FAIL


def cmd_evaluate(args: argparse.Namespace, settings: Settings) -> int:
    generated_text = _read(args.generated)
    generated = _load_playbook(args.generated)
    reference = _load_playbook(args.reference)
    report = evaluate_pair(generated, reference, args.edge_mode)
    body = report.to_dict()
    body["syntax_err_count"] = validate(generated_text, settings.get("schema_set")).syntax_err_count
    body["modes"] = {"edge_mode": args.edge_mode, "schema_set": settings.get("schema_set")}
    if args.json:
        _emit_json(body, args.out)
    else:
        lines = [
            f"metadata_accuracy        {report.metadata_accuracy:.4f}",
            f"workflow_field_accuracy  {report.workflow_field_accuracy:.4f}",
            f"variables_accuracy       {report.variables_accuracy:.4f}",
            f"ged_normalized           {report.ged.normalized:.4f}"
            f" (raw {report.ged.raw_cost}, {'exact' if report.ged.exact else 'approximate'})",
            f"syntax_err_count         {body['syntax_err_count']}",
        ]
        _write("\n".join(lines) + "\n", args.out)
    if args.max_ged is not None and report.ged.normalized > args.max_ged:
        return EXIT_FAIL
    return EXIT_OK


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def cmd_batch_eval(args: argparse.Namespace, settings: Settings) -> int:
    manifest = load_manifest(args.manifest)
    backend = _backend(settings)
    legacies = [load_legacy(e.legacy_path, e.vendor_hint) for e in manifest.entries]
    rows = []
    for preset in args.presets:
        try:
            patterns = PatternSet.parse(preset)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        cfg = _config(settings, args, patterns)

        def run(i: int) -> TransformResult:
            return transform(legacies[i], cfg, backend)

        if args.jobs > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=args.jobs) as pool:
                results = list(pool.map(run, range(len(legacies))))
        else:
            results = [run(i) for i in range(len(legacies))]

        scores = []
        for entry, result in zip(manifest.entries, results):
            if entry.reference_path is not None and result.playbook is not None:
                reference = parse_playbook(entry.reference_path.read_text(encoding="utf-8"))
                scores.append(evaluate_pair(result.playbook, reference, cfg.ged_edge_mode))
        initial = [_initial_report(r) for r in results]
        usage = usage_report(
            {e.name: r.responses for e, r in zip(manifest.entries, results)}, cfg.pricing
        )
        rows.append({
            "preset": patterns.label,
            "playbooks": len(results),
            "evaluated": len(scores),
            "avg_syn_err_initial": format_avg(avg_syn_err(initial)),
            "avg_syn_err": format_avg(avg_syn_err([r.validation for r in results])),
            "metadata_accuracy": _mean([s.metadata_accuracy for s in scores]),
            "workflow_field_accuracy": _mean([s.workflow_field_accuracy for s in scores]),
            "variables_accuracy": _mean([s.variables_accuracy for s in scores]),
            "ged_normalized": _mean([s.ged.normalized for s in scores]),
            "tokens_in": usage.total.tokens_in,
            "tokens_out": usage.total.tokens_out,
            "cost_usd": None if usage.total.cost_usd is None else str(usage.total.cost_usd),
            "cost_per_playbook_usd": None if usage.total.cost_usd is None
            else str(usage.total.cost_usd / len(results)),
        })
    if args.json:
        _emit_json({"manifest": str(manifest.path), "rows": rows}, args.out)
    else:
        _write(_table(rows), args.out)
    return EXIT_OK


class _Count:
    def __init__(self, n: int):
        self.syntax_err_count = n


def _initial_report(result: TransformResult):
    return _Count(result.refinement_trace[0].syntax_err_count)


def _cell(value: Any) -> str:
    if value is None:
        return "-"
    return f"{value:.4f}" if isinstance(value, float) else str(value)


def _table(rows: list[dict[str, Any]]) -> str:
    cols = ["preset", "playbooks", "avg_syn_err_initial", "avg_syn_err", "metadata_accuracy",
            "workflow_field_accuracy", "variables_accuracy", "ged_normalized", "tokens_in",
            "tokens_out", "cost_usd"]
    cells = [[_cell(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    fmt = lambda vals: "  ".join(v.ljust(w) for v, w in zip(vals, widths)).rstrip()  # noqa: E731
    return "\n".join([fmt(cols)] + [fmt(row) for row in cells]) + "\n"


def cmd_cache(args: argparse.Namespace, settings: Settings) -> int:
    path = settings.get("cache")
    if path is None:
        raise UsageError("cache commands need --cache")
    cache = CachingBackend(None, path)
    if args.action == "stats":
        body = cache.stats()
    else:
        body = {"removed": cache.clear()}
    if args.json:
        _emit_json(body, args.out)
    else:
        print(" ".join(f"{k}={v}" for k, v in body.items()))
    return EXIT_OK


# --------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    top = _global_options(argparse.ArgumentParser(add_help=False), suppress=False)
    # Repeated on every subcommand; SUPPRESS keeps values given before the subcommand.
    common = _global_options(argparse.ArgumentParser(add_help=False), suppress=True)

    backend = argparse.ArgumentParser(add_help=False)
    backend.add_argument("--backend", choices=("remote", "replay", "cache-through"))
    backend.add_argument("--cassette")
    backend.add_argument("--cache")
    backend.add_argument("--pricing", help="JSON pricing table")
    backend.add_argument("--url", help="chat-completion endpoint for the remote backend")
    backend.add_argument("--model")
    backend.add_argument("--timestamp", help="created/modified value for generated playbooks")

    gen = argparse.ArgumentParser(add_help=False)
    gen.add_argument("--patterns", default="all", help="baseline|all|all-no-oneshot or a comma list")
    gen.add_argument("--no-decompose", action="store_true")
    gen.add_argument("--max-refine", type=_non_negative, default=5)
    gen.add_argument("--notes", help="file with analyst feedback for refinement")
    gen.add_argument("--trace", help="write the JSON trace here")

    parser = argparse.ArgumentParser(prog="legacy2cacao", parents=[top],
                                     description="Convert legacy SOAR playbooks to CACAO 2.0.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("transform", parents=[common, backend, gen], help="legacy playbook to CACAO")
    p.add_argument("--input", nargs="+", required=True)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("record", parents=[common, backend, gen], help="transform remotely while writing a cassette")
    p.add_argument("--input", nargs="+", required=True)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("validate", parents=[common], help="check CACAO JSON files")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("refine", parents=[common, backend, gen], help="refine an existing candidate")
    p.add_argument("--input", required=True, help="legacy playbook")
    p.add_argument("--candidate", required=True, help="CACAO candidate to repair")
    p.add_argument("--interactive-review", action="store_true")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("evaluate", parents=[common], help="score a generated playbook")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--edge-mode", choices=("sequential", "all"), default="all")
    p.add_argument("--max-ged", type=float, help="exit 1 when normalized GED exceeds this")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("batch-eval", parents=[common, backend, gen], help="aggregate metrics per pattern preset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--presets", nargs="+", default=list(PRESETS))
    p.add_argument("--edge-mode", choices=("sequential", "all"), default="all")
    p.set_defaults(func=cmd_batch_eval)

    p = sub.add_parser("cache", parents=[common], help="inspect or clear the response cache")
    p.add_argument("action", choices=("stats", "clear"))
    p.add_argument("--cache")
    p.set_defaults(func=cmd_cache)
    return parser


def _global_options(p: argparse.ArgumentParser, suppress: bool) -> argparse.ArgumentParser:
    d = (lambda value: argparse.SUPPRESS) if suppress else (lambda value: value)
    p.add_argument("--config", default=d(None), help="JSON config file (lowest precedence)")
    p.add_argument("--verbose", "-v", action="store_true", default=d(False))
    p.add_argument("--json", action="store_true", default=d(False), help="emit a machine-readable report")
    p.add_argument("--out", default=d(None), help="output file (directory for several inputs)")
    p.add_argument("--jobs", type=int, default=d(1), help="playbooks processed in parallel")
    p.add_argument("--schema-set", dest="schema_set", default=d(None), choices=("patched", "strict"))
    return p


def _non_negative(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = Settings(args)
        if args.command == "record" and not settings.get("cassette"):
            raise UsageError("record needs --cassette")
        return args.func(args, settings)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestError, UnknownModelPrice) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (PipelineError, PromptError, PlaybookError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


def main() -> None:
    sys.exit(run())
