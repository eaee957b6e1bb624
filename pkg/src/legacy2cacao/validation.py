"""Schema validation of candidate CACAO JSON with countable, path-addressed issues.

Two schema sets ship as package data: ``strict`` (the vendored schemas) and
``patched`` (strict plus the overlay in ``schemas/patches/patched.json``, which
drops the agent/target/command requirements). ``patched`` is the default.

Counting unit: one issue per violated rule per location. Paths are JSON
pointers, except that the document root is written ``/``.
"""

from __future__ import annotations

import copy
import json
import re
from dataclasses import asdict, dataclass
from fractions import Fraction
from functools import lru_cache
from importlib import resources
from typing import Any, Iterable, Sequence

from jsonschema import Draft202012Validator
from referencing import Registry, Resource

from .model import STEP_KINDS, VARIABLE_NAME_RE, KIND_SPECIFIC_FIELDS

ISSUE_KINDS = (
    "missing-required",
    "type-mismatch",
    "enum-violation",
    "pattern-violation",
    "unknown-step-kind",
    "dangling-reference",
    "mutual-exclusion",
)

SCHEMA_FILES = ("playbook.json", "workflow-step.json", "variable.json")
_BASE_URI = "https://legacy2cacao.invalid/schemas/"

_STEP_ID_RE = re.compile(
    r"^(start|end|action|if-condition|while-condition|parallel|switch-condition|playbook-action)"
    r"--[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}$"
)

_KIND_BY_VALIDATOR = {
    "required": "missing-required",
    "type": "type-mismatch",
    "enum": "enum-violation",
    "const": "enum-violation",
    "pattern": "pattern-violation",
    "format": "pattern-violation",
    "minLength": "pattern-violation",
    "minItems": "pattern-violation",
    "minProperties": "pattern-violation",
    "minimum": "pattern-violation",
}

# Step fields whose meaning depends on the step kind; "switch" is the
# switch-condition spelling of "condition".
_STEP_KIND_FIELDS = {**KIND_SPECIFIC_FIELDS, "switch": frozenset({"switch-condition"})}
_STEP_KIND_FIELDS["condition"] = frozenset({"if-condition", "while-condition"})


@dataclass(frozen=True)
class ValidationIssue:
    path: str
    kind: str
    message: str
    schema_rule: str


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple[ValidationIssue, ...] = ()

    @property
    def syntax_err_count(self) -> int:
        return len(self.issues)

    @property
    def ok(self) -> bool:
        return not self.issues

    def to_dict(self) -> dict[str, Any]:
        return {
            "syntax_err_count": self.syntax_err_count,
            "issues": [asdict(i) for i in self.issues],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    def messages(self) -> list[str]:
        """One line per issue, as fed back to the model during refinement."""
        return [f"{i.path}: [{i.kind}] {i.message}" for i in self.issues]


class EmptyDataset(ValueError):
    pass


# ---------------------------------------------------------------------- schema sets


@dataclass(frozen=True)
class SchemaSet:
    name: str
    schemas: dict[str, dict]
    disabled_rules: frozenset[str]

    @property
    def registry(self) -> Registry:
        return _registry(self)


def _read_json(*parts: str) -> Any:
    ref = resources.files(__package__) / "schemas"
    for part in parts:
        ref = ref / part
    return json.loads(ref.read_text(encoding="utf-8"))


def _resolve_pointer(doc: dict, pointer: str) -> dict:
    node = doc
    for part in [p for p in pointer.split("/") if p]:
        node = node[part.replace("~1", "/").replace("~0", "~")]
    return node


def apply_patch_overlay(schemas: dict[str, dict], overlay: dict) -> tuple[dict[str, dict], frozenset[str]]:
    """Apply overlay operations to deep copies of ``schemas``."""
    patched = copy.deepcopy(schemas)
    disabled: set[str] = set()
    for op in overlay["operations"]:
        if op["op"] == "disable-rule":
            disabled.add(op["rule"])
            continue
        target = _resolve_pointer(patched[op["schema"]], op["pointer"])
        if op["op"] == "remove-required":
            target["required"] = [r for r in target.get("required", []) if r != op["property"]]
        elif op["op"] == "remove-property":
            target.get("properties", {}).pop(op["property"], None)
        else:
            raise ValueError(f"unknown overlay op {op['op']!r}")
    return patched, frozenset(disabled)


@lru_cache(maxsize=None)
def load_schema_set(name: str = "patched") -> SchemaSet:
    if name not in ("patched", "strict"):
        raise ValueError(f"schema set must be 'patched' or 'strict', not {name!r}")
    strict = {f: _read_json("strict", f) for f in SCHEMA_FILES}
    if name == "strict":
        return SchemaSet("strict", strict, frozenset())
    schemas, disabled = apply_patch_overlay(strict, _read_json("patches", "patched.json"))
    return SchemaSet("patched", schemas, disabled)


_REGISTRIES: dict[str, Registry] = {}


def _registry(schema_set: SchemaSet) -> Registry:
    if schema_set.name not in _REGISTRIES:
        registry = Registry().with_resources(
            (_BASE_URI + f, Resource.from_contents(s)) for f, s in schema_set.schemas.items()
        )
        _REGISTRIES[schema_set.name] = registry.crawl()
    return _REGISTRIES[schema_set.name]


@lru_cache(maxsize=None)
def _validator(set_name: str, ref: str) -> Draft202012Validator:
    schema_set = load_schema_set(set_name)
    return Draft202012Validator({"$ref": _BASE_URI + ref}, registry=schema_set.registry)


# ------------------------------------------------------------------------ helpers


def _escape(segment: str) -> str:
    return segment.replace("~", "~0").replace("/", "~1")


def _pointer(segments: Iterable[Any]) -> str:
    parts = [_escape(str(s)) for s in segments]
    return "/" + "/".join(parts)


class _Collector:
    def __init__(self, disabled: frozenset[str]):
        self.disabled = disabled
        self._seen: set[tuple] = set()
        self.items: list[tuple[tuple, ValidationIssue]] = []

    def add(self, segments: Sequence[Any], kind: str, message: str, rule: str) -> None:
        if rule.split(":", 1)[-1] in self.disabled:
            return
        key = (tuple(segments), kind, rule)
        if key in self._seen:
            return
        self._seen.add(key)
        self.items.append((tuple(segments), ValidationIssue(_pointer(segments), kind, message, rule)))


def _doc_order(doc: Any, segments: Sequence[Any]) -> tuple:
    """Sort key placing paths in document order; absent keys follow present siblings."""
    key: list[tuple[int, str]] = []
    node = doc
    for seg in segments:
        if isinstance(node, dict):
            keys = list(node)
            if seg in node:
                key.append((keys.index(seg), ""))
                node = node[seg]
            else:
                key.append((len(keys), str(seg)))
                node = None
        elif isinstance(node, list) and isinstance(seg, int) and 0 <= seg < len(node):
            key.append((seg, ""))
            node = node[seg]
        else:
            key.append((1 << 30, str(seg)))
            node = None
    return tuple(key)


def _schema_errors(out: _Collector, set_name: str, ref: str, instance: Any, prefix: Sequence[Any]) -> None:
    schema_name, _, fragment = ref.partition("#")
    for err in _validator(set_name, ref).iter_errors(instance):
        kind = _KIND_BY_VALIDATOR.get(err.validator, "type-mismatch")
        where = list(prefix) + list(err.absolute_path)
        rule = f"{schema_name}#{fragment}/" + "/".join(str(p) for p in err.relative_schema_path)
        if err.validator == "required":
            for prop in err.validator_value:
                if isinstance(err.instance, dict) and prop not in err.instance:
                    out.add(where + [prop], kind, f"missing required property {prop!r}", rule)
        else:
            out.add(where, kind, err.message, rule)


# ------------------------------------------------------------------------- validate


def _structural_rules(out: _Collector, doc: dict, workflow: dict) -> None:
    kinds = {k: s.get("type") for k, s in workflow.items() if isinstance(s, dict)}
    start = doc.get("workflow_start")
    if isinstance(start, str):
        if start not in workflow:
            out.add(["workflow_start"], "dangling-reference",
                    f"workflow_start {start!r} is not a workflow step", "structural:dangling-reference")
        elif kinds.get(start) != "start":
            out.add(["workflow_start"], "type-mismatch",
                    "workflow_start must refer to a start step", "structural:workflow-start-kind")
    n_start = sum(1 for k in kinds.values() if k == "start")
    if workflow and n_start == 0:
        out.add(["workflow"], "missing-required", "workflow has no start step", "structural:start-step")
    elif n_start > 1:
        out.add(["workflow"], "mutual-exclusion", "workflow has more than one start step",
                "structural:single-start")
    if workflow and not any(k == "end" for k in kinds.values()):
        out.add(["workflow"], "missing-required", "workflow has no end step", "structural:end-step")

    agents = doc.get("agent_definitions") if isinstance(doc.get("agent_definitions"), dict) else {}
    targets = doc.get("target_definitions") if isinstance(doc.get("target_definitions"), dict) else {}

    for key, step in workflow.items():
        base = ["workflow", key]
        if not _STEP_ID_RE.match(key):
            out.add(base, "pattern-violation", f"step id {key!r} is not <kind>--<uuid>",
                    "structural:step-id-format")
        if not isinstance(step, dict):
            continue
        kind = step.get("type")
        if kind not in STEP_KINDS:
            continue
        if _STEP_ID_RE.match(key) and key.rsplit("--", 1)[0] != kind:
            out.add(base, "pattern-violation", f"step id prefix does not match step type {kind!r}",
                    "structural:step-id-kind")
        for fname, allowed in _STEP_KIND_FIELDS.items():
            if fname in step and kind not in allowed:
                out.add(base + [fname], "mutual-exclusion", f"{fname!r} is not allowed on {kind} steps",
                        "structural:kind-fields")
        if "on_completion" in step and ("on_success" in step or "on_failure" in step):
            out.add(base + ["on_completion"], "mutual-exclusion",
                    "on_completion cannot be combined with on_success/on_failure",
                    "structural:completion-exclusive")
        if kind == "end":
            for label in ("on_completion", "on_success", "on_failure"):
                if label in step:
                    out.add(base + [label], "mutual-exclusion", "end steps carry no outgoing transitions",
                            "structural:end-no-transitions")
        refs: list[tuple[list, Any]] = [
            (base + [label], step[label])
            for label in ("on_true", "on_false", "on_completion", "on_success", "on_failure")
            if label in step
        ]
        if isinstance(step.get("next_steps"), list):
            refs += [(base + ["next_steps", i], t) for i, t in enumerate(step["next_steps"])]
        if isinstance(step.get("cases"), dict):
            refs += [(base + ["cases", c], t) for c, t in step["cases"].items()]
        for where, target in refs:
            if isinstance(target, str) and target not in workflow:
                out.add(where, "dangling-reference", f"{target!r} is not a workflow step",
                        "structural:dangling-reference")
        if isinstance(step.get("agent"), str) and step["agent"] not in agents:
            out.add(base + ["agent"], "dangling-reference",
                    f"agent {step['agent']!r} is not in agent_definitions", "structural:agent-reference")
        if isinstance(step.get("targets"), list):
            for i, t in enumerate(step["targets"]):
                if isinstance(t, str) and t not in targets:
                    out.add(base + ["targets", i], "dangling-reference",
                            f"target {t!r} is not in target_definitions", "structural:target-reference")
        _variable_names(out, step.get("step_variables"), base + ["step_variables"])


def _variable_names(out: _Collector, variables: Any, base: list) -> None:
    if not isinstance(variables, dict):
        return
    for name in variables:
        if not VARIABLE_NAME_RE.match(name):
            out.add(base + [name], "pattern-violation", f"variable name {name!r} must look like __name__",
                    "structural:variable-name")


def validate_obj(doc: Any, schema_set: str = "patched") -> ValidationReport:
    """Validate an already-decoded JSON value. Never mutates ``doc``."""
    sset = load_schema_set(schema_set)
    out = _Collector(sset.disabled_rules)
    _schema_errors(out, schema_set, "playbook.json", doc, [])
    if isinstance(doc, dict):
        workflow = doc.get("workflow") if isinstance(doc.get("workflow"), dict) else {}
        for key, step in workflow.items():
            base = ["workflow", key]
            if not isinstance(step, dict):
                out.add(base, "type-mismatch", "workflow step must be an object", "workflow-step.json#/type")
                continue
            kind = step.get("type")
            if "type" not in step:
                out.add(base + ["type"], "missing-required", "missing required property 'type'",
                        "workflow-step.json#/$defs/common/required")
            elif not isinstance(kind, str):
                out.add(base + ["type"], "type-mismatch", "step type must be a string",
                        "workflow-step.json#/$defs/common/properties/type/type")
            elif kind not in STEP_KINDS:
                out.add(base, "unknown-step-kind", f"unknown step type {kind!r}", "structural:step-kind")
            else:
                _schema_errors(out, schema_set, f"workflow-step.json#/$defs/{kind}", step, base)
        _structural_rules(out, doc, workflow)
        _variable_names(out, doc.get("playbook_variables"), ["playbook_variables"])
    ordered = sorted(out.items, key=lambda item: (_doc_order(doc, item[0]), item[1].schema_rule))
    return ValidationReport(tuple(issue for _, issue in ordered))


def validate(candidate: str, schema_set: str = "patched") -> ValidationReport:
    """Validate candidate JSON text. Malformed JSON is a single root-level issue."""
    try:
        doc = json.loads(candidate)
    except json.JSONDecodeError as exc:
        return ValidationReport((
            ValidationIssue("/", "type-mismatch",
                            f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}",
                            "json:well-formed"),
        ))
    return validate_obj(doc, schema_set)


def avg_syn_err(reports: Sequence[ValidationReport]) -> Fraction:
    """Mean syntax-error count per playbook, as an exact fraction."""
    if not reports:
        raise EmptyDataset("avg_syn_err needs at least one report")
    return Fraction(sum(r.syntax_err_count for r in reports), len(reports))


def format_avg(value: Fraction) -> str:
    return f"{float(value):.2f}"
