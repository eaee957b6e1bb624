"""End-to-end transformation of a legacy playbook into CACAO 2.0 JSON.

With decomposition the sub-tasks run strictly in this order, one completion
each: metadata, workflow-skeleton, step-attributes (once per skeleton step),
variables. Without it a single whole-playbook prompt is issued. The result is
always validated and, while issues remain, refined up to
``max_refine_iterations`` times.

Fragment formats expected from the model:

* metadata: ``{"name", "description", "playbook_types", "playbook_activities"}``
* workflow-skeleton: ``{"steps": [{"name", "type"}, ...]}`` in workflow order
* step-attributes: ``{"name", "description", "condition", <transitions>,
  "next_steps", "cases", "playbook_id", "step_variables"}``, referring to other
  steps by skeleton name
* variables: ``{"__name__": {"type", "description", ...}}``

Assembly never invents semantic content: null or missing values stay
missing. Only ``type``, ``spec_version``, ``id``, ``created``, ``modified``
and step ids are generated, deterministically from ``TransformConfig.id_seed``
and ``TransformConfig.timestamp``.
"""

from __future__ import annotations

import json
import logging
import random
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Callable, Iterable, Mapping, Sequence

from .backend import (
    DEFAULT_MODEL,
    DEFAULT_SEED,
    Backend,
    CompletionRequest,
    CompletionResponse,
    PricingConfig,
    UsageReport,
    usage_report,
)
from .ingest import LegacyDocument
from .model import (
    STEP_KINDS,
    PlaybookDocument,
    PlaybookError,
    dump_json,
    playbook_from_obj,
    serialize_playbook,
)
from .prompts import (
    DEFAULT_CONTEXT_WINDOW,
    REFINEMENT_PATTERNS,
    PatternSet,
    PromptInputs,
    PromptSpec,
    SubTask,
    build_prompt,
)
from .validation import ValidationReport, validate

log = logging.getLogger(__name__)

# Clock used whenever runs must be reproducible (replay, record, cache-through).
FIXED_TIMESTAMP = "2024-01-01T00:00:00.000Z"

_TRANSITIONS = ("on_true", "on_false", "on_completion", "on_success", "on_failure")


class PipelineError(RuntimeError):
    pass


class NoJsonFound(PipelineError):
    pass


class FragmentUnparseable(PipelineError):
    def __init__(self, subtask: SubTask | str, detail: str):
        super().__init__(f"{subtask}: {detail}")
        self.subtask = subtask


class SkeletonAttributeMismatch(PipelineError):
    def __init__(self, step_name: str):
        super().__init__(f"attribute fragment names unknown step {step_name!r}")
        self.step_name = step_name


@dataclass(frozen=True)
class TransformConfig:
    patterns: PatternSet = field(default_factory=lambda: PatternSet.preset("all"))
    decompose: bool = True
    max_refine_iterations: int = 5
    ged_edge_mode: str = "all"
    context_window_tokens: int = DEFAULT_CONTEXT_WINDOW
    model_id: str = DEFAULT_MODEL
    temperature: float = 0.0
    seed: int = DEFAULT_SEED
    max_output_tokens: int = 4096
    schema_set: str = "patched"
    id_seed: int = 42
    timestamp: str | None = None  # None: current UTC time
    pricing: PricingConfig | None = None

    def __post_init__(self) -> None:
        if self.max_refine_iterations < 0:
            raise ValueError("max_refine_iterations must be >= 0")
        if self.ged_edge_mode not in ("sequential", "all"):
            raise ValueError("ged_edge_mode must be 'sequential' or 'all'")


@dataclass(frozen=True)
class TraceEntry:
    iteration: int
    syntax_err_count: int


@dataclass
class TransformResult:
    playbook_text: str
    playbook: PlaybookDocument | None
    validation: ValidationReport
    fragments: dict[SubTask, str] = field(default_factory=dict)
    refinement_trace: list[TraceEntry] = field(default_factory=list)
    responses: list[CompletionResponse] = field(default_factory=list)
    usage: UsageReport | None = None

    def trace_dict(self) -> dict[str, Any]:
        return {
            "fragments": {str(k): v for k, v in self.fragments.items()},
            "refinement_trace": [
                {"iteration": t.iteration, "syntax_err_count": t.syntax_err_count}
                for t in self.refinement_trace
            ],
            "validation": self.validation.to_dict(),
            "completions": len(self.responses),
            "usage": self.usage.to_dict() if self.usage else None,
        }


# ------------------------------------------------------------- fragment parsing


def _balanced_objects(text: str) -> Iterable[tuple[int, int]]:
    """Yield ``(start, end)`` spans of brace-balanced ``{...}`` runs, string-aware."""
    start = text.find("{")
    while start != -1:
        depth = 0
        in_str = escaped = False
        end = None
        for i in range(start, len(text)):
            c = text[i]
            if in_str:
                if escaped:
                    escaped = False
                elif c == "\\":
                    escaped = True
                elif c == '"':
                    in_str = False
            elif c == '"':
                in_str = True
            elif c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
                if depth == 0:
                    end = i + 1
                    break
        if end is not None:
            yield start, end
        start = text.find("{", start + 1)


def extract_json_fragment(completion_text: str) -> str:
    """Return the first JSON object in a completion, verbatim.

    Fenced code blocks are searched first; otherwise the first balanced
    ``{...}`` run that parses as JSON wins.
    """
    fences = []
    parts = completion_text.split("```")
    for body in parts[1:-1:2]:
        first, _, rest = body.partition("\n")
        fences.append(rest if first.strip().isalpha() or not first.strip() else body)
    for chunk in fences + [completion_text]:
        for start, end in _balanced_objects(chunk):
            candidate = chunk[start:end]
            try:
                json.loads(candidate)
            except json.JSONDecodeError:
                continue
            return candidate
    raise NoJsonFound("no JSON object in completion")


def _load_fragment(text: str, task: SubTask | str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FragmentUnparseable(task, str(exc)) from None


def canonical_text(obj: Any) -> str:
    """Canonical serialization when ``obj`` fits the typed model, else plain indented JSON."""
    try:
        return serialize_playbook(playbook_from_obj(obj))
    except PlaybookError:
        return dump_json(obj)


def try_parse(text: str) -> PlaybookDocument | None:
    try:
        return playbook_from_obj(json.loads(text))
    except (PlaybookError, json.JSONDecodeError):
        return None


# ------------------------------------------------------------------- assembly


class IdSource:
    """Seeded UUIDv4 generator, so replayed runs produce identical ids."""

    def __init__(self, seed: int):
        self._rng = random.Random(seed)

    def next(self) -> str:
        return str(uuid.UUID(int=self._rng.getrandbits(128), version=4))


def _now() -> str:
    now = datetime.now(timezone.utc)
    return now.strftime("%Y-%m-%dT%H:%M:%S.") + f"{now.microsecond // 1000:03d}Z"


def _clean(value: Any) -> Any:
    """Drop null members recursively; the model's nulls mean 'not in the source'."""
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items() if v is not None}
    if isinstance(value, list):
        return [_clean(v) for v in value if v is not None]
    return value


def parse_skeleton(text: str) -> list[dict[str, str]]:
    task = SubTask("workflow-skeleton")
    obj = _load_fragment(text, task)
    steps = obj.get("steps") if isinstance(obj, dict) else obj
    if not isinstance(steps, list) or not all(
        isinstance(s, dict) and isinstance(s.get("name"), str) and isinstance(s.get("type"), str)
        for s in steps
    ):
        raise FragmentUnparseable(task, "expected {'steps': [{'name': ..., 'type': ...}, ...]}")
    return [{"name": s["name"], "type": s["type"]} for s in steps]


def _match_step(fragment: Mapping, position: int | None, skeleton: Sequence[Mapping]) -> int:
    """Exact name, then case-insensitive name; positional only when the fragment has no name."""
    name = fragment.get("name")
    if not isinstance(name, str):
        if position is None or not 0 <= position < len(skeleton):
            raise SkeletonAttributeMismatch(str(name))
        return position
    for matches in (
        [i for i, s in enumerate(skeleton) if s["name"] == name],
        [i for i, s in enumerate(skeleton) if s["name"].casefold() == name.casefold()],
    ):
        if matches:
            return position if position in matches else matches[0]
    raise SkeletonAttributeMismatch(name)


def assemble_obj(
    fragments: Mapping[SubTask, str],
    ids: IdSource,
    timestamp: str,
) -> dict[str, Any]:
    """Merge decomposed fragments into one CACAO playbook object."""
    by_kind = {t.kind: (t, text) for t, text in fragments.items() if t.kind != "step-attributes"}
    for needed in ("metadata", "workflow-skeleton"):
        if needed not in by_kind:
            raise FragmentUnparseable(needed, "fragment missing")
    meta = _load_fragment(by_kind["metadata"][1], by_kind["metadata"][0])
    if not isinstance(meta, dict):
        raise FragmentUnparseable(by_kind["metadata"][0], "expected an object")
    skeleton = parse_skeleton(by_kind["workflow-skeleton"][1])

    out: dict[str, Any] = {"type": "playbook", "spec_version": "cacao-2.0", "id": f"playbook--{ids.next()}"}
    for key in ("name", "description", "playbook_types", "playbook_activities"):
        if meta.get(key) is not None:
            out[key] = _clean(meta[key])
    out["created"] = timestamp
    out["modified"] = timestamp

    step_ids = [f"{s['type']}--{ids.next()}" for s in skeleton]
    steps: list[dict[str, Any]] = [{"type": s["type"], "name": s["name"]} for s in skeleton]

    def resolve(target: Any) -> Any:
        if not isinstance(target, str):
            return target
        for i, s in enumerate(skeleton):
            if s["name"] == target:
                return step_ids[i]
        for i, s in enumerate(skeleton):
            if s["name"].casefold() == target.casefold():
                return step_ids[i]
        return target  # left for the validator to flag

    attr_tasks = sorted((t for t in fragments if t.kind == "step-attributes"), key=lambda t: t.index or 0)
    for task in attr_tasks:
        attrs = _load_fragment(fragments[task], task)
        if not isinstance(attrs, dict):
            raise FragmentUnparseable(task, "expected an object")
        attrs = _clean(attrs)
        i = _match_step(attrs, task.index, skeleton)
        step = steps[i]
        for key, value in attrs.items():
            if key in ("name", "type"):
                continue
            if key == "condition" and step["type"] == "switch-condition":
                key = "switch"
            if key in _TRANSITIONS:
                value = resolve(value)
            elif key == "next_steps" and isinstance(value, list):
                value = [resolve(v) for v in value]
            elif key == "cases" and isinstance(value, dict):
                value = {k: resolve(v) for k, v in value.items()}
            step[key] = value

    variables: dict[str, Any] = {}
    if "variables" in by_kind:
        raw_vars = _load_fragment(by_kind["variables"][1], by_kind["variables"][0])
        if not isinstance(raw_vars, dict):
            raise FragmentUnparseable(by_kind["variables"][0], "expected an object")
        variables = _clean(raw_vars.get("playbook_variables", raw_vars))
    out["playbook_variables"] = variables
    starts = [sid for sid, s in zip(step_ids, skeleton) if s["type"] == "start"]
    if starts:
        out["workflow_start"] = starts[0]
    out["workflow"] = dict(zip(step_ids, steps))
    return out


def assemble(fragments: Mapping[SubTask, str], id_seed: int = 42,
             timestamp: str = "1970-01-01T00:00:00.000Z") -> PlaybookDocument:
    return playbook_from_obj(assemble_obj(fragments, IdSource(id_seed), timestamp))


def fill_whole_playbook(text: str, ids: IdSource, timestamp: str) -> dict[str, Any]:
    task = SubTask("whole-playbook")
    obj = _load_fragment(text, task)
    if not isinstance(obj, dict):
        raise FragmentUnparseable(task, "expected an object")
    obj = _clean(obj)
    filled: dict[str, Any] = {"type": "playbook", "spec_version": "cacao-2.0"}
    filled.update(obj)
    filled.setdefault("id", f"playbook--{ids.next()}")
    filled.setdefault("created", timestamp)
    filled.setdefault("modified", timestamp)
    return filled


# ------------------------------------------------------------------ transform


class _Runner:
    def __init__(self, backend: Backend, cfg: TransformConfig, legacy: LegacyDocument):
        self.backend = backend
        self.cfg = cfg
        self.legacy = legacy
        self.responses: list[CompletionResponse] = []

    def ask(self, task: SubTask, prompt_inputs: PromptInputs, patterns: PatternSet | None = None) -> str:
        spec: PromptSpec = build_prompt(
            task,
            patterns or self.cfg.patterns,
            prompt_inputs,
            context_window=self.cfg.context_window_tokens,
        )
        req = CompletionRequest(
            model_id=self.cfg.model_id,
            system_text=spec.system_text,
            user_text=spec.user_text,
            temperature=self.cfg.temperature,
            seed=self.cfg.seed,
            max_output_tokens=self.cfg.max_output_tokens,
        )
        resp = self.backend.complete(req)
        self.responses.append(resp)
        log.debug("%s: %d tokens in, %d out (%s)", task, resp.tokens_in, resp.tokens_out, resp.source)
        try:
            return extract_json_fragment(resp.text)
        except NoJsonFound:
            raise FragmentUnparseable(task, "completion contains no JSON object") from None

    def usage(self) -> UsageReport:
        name = self.legacy.path.name if self.legacy.path else "playbook"
        return usage_report({name: self.responses}, self.cfg.pricing)


def _generate(runner: _Runner) -> tuple[dict[str, Any], dict[SubTask, str]]:
    cfg, legacy = runner.cfg, runner.legacy
    ids = IdSource(cfg.id_seed)
    timestamp = cfg.timestamp or _now()
    fragments: dict[SubTask, str] = {}
    if not cfg.decompose:
        task = SubTask("whole-playbook")
        fragments[task] = runner.ask(task, PromptInputs(legacy.raw_text))
        return fill_whole_playbook(fragments[task], ids, timestamp), fragments

    meta = SubTask("metadata")
    fragments[meta] = runner.ask(meta, PromptInputs(legacy.raw_text))
    skel = SubTask("workflow-skeleton")
    fragments[skel] = runner.ask(skel, PromptInputs(legacy.raw_text))
    skeleton = parse_skeleton(fragments[skel])
    history = {"workflow-skeleton": fragments[skel]}
    for i, step in enumerate(skeleton):
        if step["type"] not in STEP_KINDS:
            log.warning("skeleton step %r has unknown type %r; no attributes requested", step["name"], step["type"])
            continue
        task = SubTask("step-attributes", step_kind=step["type"], step_name=step["name"], index=i)
        fragments[task] = runner.ask(task, PromptInputs(legacy.raw_text, history))
    var_task = SubTask("variables")
    fragments[var_task] = runner.ask(var_task, PromptInputs(legacy.raw_text, history))
    return assemble_obj(fragments, ids, timestamp), fragments


ReviewHook = Callable[[int, ValidationReport], "str | None"]


def _refine_loop(
    runner: _Runner,
    text: str,
    report: ValidationReport,
    analyst_notes: str | None,
    review: ReviewHook | None,
) -> tuple[str, ValidationReport, list[TraceEntry]]:
    cfg = runner.cfg
    trace = [TraceEntry(0, report.syntax_err_count)]
    best = (report.syntax_err_count, text, report)
    current, current_report = text, report
    for iteration in range(1, cfg.max_refine_iterations + 1):
        if current_report.ok:
            break
        try:
            notes = analyst_notes
            if review is not None:
                notes = review(iteration, current_report) or analyst_notes
            inputs = PromptInputs(
                runner.legacy.raw_text,
                {"previous_transformation": current},
                tuple(current_report.messages()),
                notes,
            )
            fragment = runner.ask(SubTask("refinement"), inputs, REFINEMENT_PATTERNS)
            current = canonical_text(json.loads(fragment))
        except Exception as exc:
            exc.partial_trace = list(trace)  # type: ignore[attr-defined]
            raise
        current_report = validate(current, cfg.schema_set)
        trace.append(TraceEntry(iteration, current_report.syntax_err_count))
        if current_report.syntax_err_count <= best[0]:
            best = (current_report.syntax_err_count, current, current_report)
    return best[1], best[2], trace


def refine(
    legacy: LegacyDocument,
    candidate: PlaybookDocument | str,
    report: ValidationReport | None,
    cfg: TransformConfig,
    backend: Backend,
    analyst_notes: str | None = None,
    review: ReviewHook | None = None,
) -> TransformResult:
    """Feed validator errors back to the model until clean or out of iterations.

    Uses one whole-playbook prompt per round with the persona, template and
    reasoning patterns. Returns the candidate with the fewest issues; on ties
    the later one.
    """
    text = candidate if isinstance(candidate, str) else serialize_playbook(candidate)
    if report is None:
        report = validate(text, cfg.schema_set)
    runner = _Runner(backend, cfg, legacy)
    best_text, best_report, trace = _refine_loop(runner, text, report, analyst_notes, review)
    return TransformResult(
        playbook_text=best_text,
        playbook=try_parse(best_text),
        validation=best_report,
        refinement_trace=trace,
        responses=runner.responses,
        usage=runner.usage(),
    )


def transform(
    legacy: LegacyDocument,
    cfg: TransformConfig,
    backend: Backend,
    analyst_notes: str | None = None,
    review: ReviewHook | None = None,
) -> TransformResult:
    runner = _Runner(backend, cfg, legacy)
    obj, fragments = _generate(runner)
    text = canonical_text(obj)
    report = validate(text, cfg.schema_set)
    best_text, best_report, trace = _refine_loop(runner, text, report, analyst_notes, review)
    return TransformResult(
        playbook_text=best_text,
        playbook=try_parse(best_text),
        validation=best_report,
        fragments=fragments,
        refinement_trace=trace,
        responses=runner.responses,
        usage=runner.usage(),
    )


def transform_many(
    legacies: Sequence[LegacyDocument],
    cfg: TransformConfig,
    backend: Backend,
    jobs: int = 1,
) -> list[TransformResult]:
    """Transform several playbooks; each one runs sequentially, playbooks in parallel."""
    if jobs <= 1:
        return [transform(doc, cfg, backend) for doc in legacies]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda doc: transform(doc, cfg, backend), legacies))
