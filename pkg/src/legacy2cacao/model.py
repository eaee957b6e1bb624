"""Typed CACAO 2.0 playbooks: parsing, canonical serialization, workflow graphs.

Canonical key order (used by :func:`serialize_playbook`)::

    playbook: type, spec_version, id, name, description, playbook_types,
              playbook_activities, created, modified, <unknown keys>,
              playbook_variables, workflow_start, workflow
    step:     type, name, description, condition|switch, cases, next_steps,
              playbook_id, step_variables, <unknown keys>, on_true, on_false,
              on_completion, on_success, on_failure
    variable: type, description, value, constant, external, <unknown keys>

Unknown keys keep their original relative order. ``constant``/``external`` are
emitted only when true. Output is two-space indented UTF-8 JSON plus a newline.
"""

from __future__ import annotations

import json
import re
import uuid
from dataclasses import dataclass, field
from typing import Any, Iterator

STEP_KINDS: tuple[str, ...] = (
    "start",
    "end",
    "action",
    "if-condition",
    "while-condition",
    "parallel",
    "switch-condition",
    "playbook-action",
)

COMMON_TRANSITIONS = ("on_completion", "on_success", "on_failure")

# Fields a step may only carry when it is of the listed kind(s).
KIND_SPECIFIC_FIELDS: dict[str, frozenset[str]] = {
    "condition": frozenset({"if-condition", "while-condition", "switch-condition"}),
    "on_true": frozenset({"if-condition", "while-condition"}),
    "on_false": frozenset({"if-condition"}),
    "next_steps": frozenset({"parallel"}),
    "cases": frozenset({"switch-condition"}),
    "playbook_id": frozenset({"playbook-action"}),
}

EDGE_LABELS_SEQUENTIAL = ("on_completion", "on_success", "on_failure", "on_true", "on_false")
EDGE_LABELS_ALL = EDGE_LABELS_SEQUENTIAL + ("next_steps", "case")

VARIABLE_NAME_RE = re.compile(r"^__[A-Za-z0-9_-]+__$")
TIMESTAMP_RE = re.compile(r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}\.\d{3}Z$")

_PLAYBOOK_KNOWN = (
    "type",
    "spec_version",
    "id",
    "name",
    "description",
    "playbook_types",
    "playbook_activities",
    "created",
    "modified",
    "playbook_variables",
    "workflow_start",
    "workflow",
)
_STEP_KNOWN = (
    "type",
    "name",
    "description",
    "condition",
    "switch",
    "cases",
    "next_steps",
    "playbook_id",
    "step_variables",
    "on_true",
    "on_false",
    "on_completion",
    "on_success",
    "on_failure",
)
_VARIABLE_KNOWN = ("type", "description", "value", "constant", "external")


class PlaybookError(ValueError):
    """Base class for problems turning JSON into a :class:`PlaybookDocument`."""


class MalformedJson(PlaybookError):
    def __init__(self, msg: str, lineno: int, colno: int, pos: int):
        super().__init__(f"malformed JSON at line {lineno} column {colno}: {msg}")
        self.lineno = lineno
        self.colno = colno
        self.pos = pos


class NotAPlaybook(PlaybookError):
    pass


class InvalidPlaybook(PlaybookError):
    """A field has a shape the typed model cannot hold."""


class InvalidStep(InvalidPlaybook):
    pass


class DanglingReference(PlaybookError):
    def __init__(self, step_id: str, source: str | None = None):
        where = f" (from {source})" if source else ""
        super().__init__(f"transition targets missing step {step_id!r}{where}")
        self.step_id = step_id
        self.source = source


@dataclass(frozen=True)
class StepId:
    """``<kind>--<uuid>`` identifier of a workflow step."""

    kind: str
    uuid: str

    def __post_init__(self) -> None:
        if self.kind not in STEP_KINDS:
            raise ValueError(f"unknown step kind {self.kind!r}")
        if str(uuid.UUID(self.uuid)) != self.uuid:
            raise ValueError(f"uuid {self.uuid!r} is not canonical lowercase")

    @classmethod
    def parse(cls, text: str) -> StepId:
        kind, sep, rest = text.rpartition("--")
        if not sep:
            raise ValueError(f"{text!r} is not of the form <kind>--<uuid>")
        return cls(kind, rest)

    @classmethod
    def new(cls, kind: str, value: uuid.UUID) -> StepId:
        return cls(kind, str(value))

    def __str__(self) -> str:
        return f"{self.kind}--{self.uuid}"


@dataclass(frozen=True)
class VariableDef:
    var_type: str
    description: str | None = None
    value: Any = None
    constant: bool = False
    external: bool = False
    extras: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class WorkflowStep:
    kind: str
    name: str | None = None
    description: str | None = None
    on_completion: str | None = None
    on_success: str | None = None
    on_failure: str | None = None
    condition: str | None = None
    on_true: str | None = None
    on_false: str | None = None
    next_steps: tuple[str, ...] | None = None
    cases: dict[str, str] | None = None
    playbook_id: str | None = None
    step_variables: dict[str, VariableDef] | None = None
    extras: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in STEP_KINDS:
            raise InvalidStep(f"unknown step kind {self.kind!r}")
        for fname, kinds in KIND_SPECIFIC_FIELDS.items():
            if getattr(self, fname) is not None and self.kind not in kinds:
                raise InvalidStep(f"field {fname!r} is not allowed on {self.kind} steps")
        if self.on_completion is not None and (
            self.on_success is not None or self.on_failure is not None
        ):
            raise InvalidStep("on_completion cannot be combined with on_success/on_failure")
        if self.kind == "end" and any(t is not None for _, t in self.transitions()):
            raise InvalidStep("end steps carry no outgoing transitions")

    def transitions(self) -> Iterator[tuple[str, str]]:
        """Yield ``(label, target)`` for every transition target, in canonical order."""
        for label in ("on_true", "on_false", "on_completion", "on_success", "on_failure"):
            target = getattr(self, label)
            if target is not None:
                yield label, target
        for target in self.next_steps or ():
            yield "next_steps", target
        for target in (self.cases or {}).values():
            yield "case", target


@dataclass(frozen=True)
class PlaybookDocument:
    """A CACAO 2.0 playbook restricted to metadata, workflow and variables.

    Instances are treated as immutable. Required-by-schema fields are optional
    here so that schema-invalid candidates can still be represented and scored.
    """

    id: str | None = None
    name: str | None = None
    description: str | None = None
    created: str | None = None
    modified: str | None = None
    playbook_types: tuple[str, ...] | None = None
    playbook_activities: tuple[str, ...] | None = None
    workflow_start: str | None = None
    workflow: dict[str, WorkflowStep] = field(default_factory=dict)
    playbook_variables: dict[str, VariableDef] = field(default_factory=dict)
    extras: dict[str, Any] = field(default_factory=dict)
    doc_type: str = "playbook"
    spec_version: str = "cacao-2.0"


# --------------------------------------------------------------------------- parse


def _opt_str(obj: dict, key: str, where: str) -> str | None:
    value = obj.get(key)
    if value is not None and not isinstance(value, str):
        raise InvalidPlaybook(f"{where}/{key} must be a string")
    return value


def _opt_str_list(obj: dict, key: str, where: str) -> tuple[str, ...] | None:
    value = obj.get(key)
    if value is None:
        return None
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise InvalidPlaybook(f"{where}/{key} must be a list of strings")
    return tuple(value)


def _extras(obj: dict, known: tuple[str, ...]) -> dict[str, Any]:
    return {k: v for k, v in obj.items() if k not in known}


def parse_variable(obj: Any, where: str = "") -> VariableDef:
    if not isinstance(obj, dict):
        raise InvalidPlaybook(f"{where} must be an object")
    var_type = obj.get("type")
    if not isinstance(var_type, str):
        raise InvalidPlaybook(f"{where}/type must be a string")
    for flag in ("constant", "external"):
        if not isinstance(obj.get(flag, False), bool):
            raise InvalidPlaybook(f"{where}/{flag} must be a boolean")
    return VariableDef(
        var_type=var_type,
        description=_opt_str(obj, "description", where),
        value=obj.get("value"),
        constant=obj.get("constant", False),
        external=obj.get("external", False),
        extras=_extras(obj, _VARIABLE_KNOWN),
    )


def _parse_variables(obj: Any, where: str) -> dict[str, VariableDef]:
    if not isinstance(obj, dict):
        raise InvalidPlaybook(f"{where} must be an object")
    return {name: parse_variable(v, f"{where}/{name}") for name, v in obj.items()}


def parse_step(obj: Any, where: str = "") -> WorkflowStep:
    if not isinstance(obj, dict):
        raise InvalidPlaybook(f"{where} must be an object")
    kind = obj.get("type")
    if not isinstance(kind, str):
        raise InvalidStep(f"{where}/type must be a string")
    # switch-condition stores its expression under "switch".
    cond_key = "switch" if kind == "switch-condition" else "condition"
    other_cond = "condition" if cond_key == "switch" else "switch"
    if other_cond in obj:
        raise InvalidStep(f"field {other_cond!r} is not allowed on {kind} steps")
    next_steps = _opt_str_list(obj, "next_steps", where)
    cases = obj.get("cases")
    if cases is not None and (
        not isinstance(cases, dict) or not all(isinstance(v, str) for v in cases.values())
    ):
        raise InvalidPlaybook(f"{where}/cases must map tokens to step ids")
    step_vars = obj.get("step_variables")
    return WorkflowStep(
        kind=kind,
        name=_opt_str(obj, "name", where),
        description=_opt_str(obj, "description", where),
        on_completion=_opt_str(obj, "on_completion", where),
        on_success=_opt_str(obj, "on_success", where),
        on_failure=_opt_str(obj, "on_failure", where),
        condition=_opt_str(obj, cond_key, where),
        on_true=_opt_str(obj, "on_true", where),
        on_false=_opt_str(obj, "on_false", where),
        next_steps=next_steps,
        cases=dict(cases) if cases is not None else None,
        playbook_id=_opt_str(obj, "playbook_id", where),
        step_variables=(
            _parse_variables(step_vars, f"{where}/step_variables")
            if step_vars is not None
            else None
        ),
        extras=_extras(obj, _STEP_KNOWN),
    )


def playbook_from_obj(obj: Any) -> PlaybookDocument:
    if not isinstance(obj, dict):
        raise NotAPlaybook("top-level JSON value must be an object")
    if "type" not in obj or "spec_version" not in obj:
        raise NotAPlaybook("missing 'type' or 'spec_version'")
    if obj["type"] != "playbook":
        raise NotAPlaybook(f"type is {obj['type']!r}, expected 'playbook'")
    if not isinstance(obj["spec_version"], str):
        raise InvalidPlaybook("/spec_version must be a string")
    workflow = obj.get("workflow", {})
    if not isinstance(workflow, dict):
        raise InvalidPlaybook("/workflow must be an object")
    return PlaybookDocument(
        id=_opt_str(obj, "id", ""),
        name=_opt_str(obj, "name", ""),
        description=_opt_str(obj, "description", ""),
        created=_opt_str(obj, "created", ""),
        modified=_opt_str(obj, "modified", ""),
        playbook_types=_opt_str_list(obj, "playbook_types", ""),
        playbook_activities=_opt_str_list(obj, "playbook_activities", ""),
        workflow_start=_opt_str(obj, "workflow_start", ""),
        workflow={k: parse_step(v, f"/workflow/{k}") for k, v in workflow.items()},
        playbook_variables=_parse_variables(
            obj.get("playbook_variables", {}), "/playbook_variables"
        ),
        extras=_extras(obj, _PLAYBOOK_KNOWN),
        spec_version=obj["spec_version"],
    )


def parse_playbook(text: str) -> PlaybookDocument:
    """Parse CACAO JSON text into a :class:`PlaybookDocument`."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedJson(exc.msg, exc.lineno, exc.colno, exc.pos) from None
    return playbook_from_obj(obj)


# ----------------------------------------------------------------------- serialize


def variable_to_obj(var: VariableDef) -> dict[str, Any]:
    out: dict[str, Any] = {"type": var.var_type}
    if var.description is not None:
        out["description"] = var.description
    if var.value is not None:
        out["value"] = var.value
    if var.constant:
        out["constant"] = True
    if var.external:
        out["external"] = True
    out.update(var.extras)
    return out


def step_to_obj(step: WorkflowStep) -> dict[str, Any]:
    out: dict[str, Any] = {"type": step.kind}
    if step.name is not None:
        out["name"] = step.name
    if step.description is not None:
        out["description"] = step.description
    if step.condition is not None:
        out["switch" if step.kind == "switch-condition" else "condition"] = step.condition
    if step.cases is not None:
        out["cases"] = dict(step.cases)
    if step.next_steps is not None:
        out["next_steps"] = list(step.next_steps)
    if step.playbook_id is not None:
        out["playbook_id"] = step.playbook_id
    if step.step_variables is not None:
        out["step_variables"] = {k: variable_to_obj(v) for k, v in step.step_variables.items()}
    out.update(step.extras)
    for label in ("on_true", "on_false", "on_completion", "on_success", "on_failure"):
        target = getattr(step, label)
        if target is not None:
            out[label] = target
    return out


def playbook_to_obj(doc: PlaybookDocument) -> dict[str, Any]:
    out: dict[str, Any] = {"type": doc.doc_type, "spec_version": doc.spec_version}
    for key in ("id", "name", "description"):
        if getattr(doc, key) is not None:
            out[key] = getattr(doc, key)
    for key in ("playbook_types", "playbook_activities"):
        if getattr(doc, key) is not None:
            out[key] = list(getattr(doc, key))
    for key in ("created", "modified"):
        if getattr(doc, key) is not None:
            out[key] = getattr(doc, key)
    out.update(doc.extras)
    out["playbook_variables"] = {
        k: variable_to_obj(v) for k, v in doc.playbook_variables.items()
    }
    if doc.workflow_start is not None:
        out["workflow_start"] = doc.workflow_start
    out["workflow"] = {k: step_to_obj(s) for k, s in doc.workflow.items()}
    return out


def dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, ensure_ascii=False) + "\n"


def serialize_playbook(doc: PlaybookDocument) -> str:
    return dump_json(playbook_to_obj(doc))


# --------------------------------------------------------------------------- graph


@dataclass(frozen=True)
class GraphNode:
    key: str
    kind: str
    normalized_name: str


@dataclass(frozen=True)
class GraphEdge:
    source: str
    target: str
    label: str


@dataclass(frozen=True)
class WorkflowGraph:
    nodes: tuple[GraphNode, ...] = ()
    edges: tuple[GraphEdge, ...] = ()

    def __post_init__(self) -> None:
        keys = [n.key for n in self.nodes]
        if len(set(keys)) != len(keys):
            raise ValueError("node keys must be unique")
        known = set(keys)
        for e in self.edges:
            if e.source not in known or e.target not in known:
                raise ValueError(f"edge {e} references an unknown node")


def normalize_name(name: str | None) -> str:
    return (name or "").strip().lower()


def build_workflow_graph(doc: PlaybookDocument, edge_mode: str = "all") -> WorkflowGraph:
    """One node per workflow step, one labeled edge per transition target.

    ``edge_mode="sequential"`` keeps only the five sequential/conditional labels and
    drops ``next_steps`` and switch ``case`` edges.
    """
    if edge_mode not in ("all", "sequential"):
        raise ValueError(f"edge_mode must be 'all' or 'sequential', not {edge_mode!r}")
    labels = EDGE_LABELS_ALL if edge_mode == "all" else EDGE_LABELS_SEQUENTIAL
    nodes = tuple(
        GraphNode(key, step.kind, normalize_name(step.name)) for key, step in doc.workflow.items()
    )
    edges = []
    for key, step in doc.workflow.items():
        for label, target in step.transitions():
            if label not in labels:
                continue
            if target not in doc.workflow:
                raise DanglingReference(target, key)
            edges.append(GraphEdge(key, target, label))
    return WorkflowGraph(nodes, tuple(edges))
