"""Prompt assembly for the transformation sub-tasks.

Static wording lives in ``templates/<version>/`` with ``{{placeholder}}``
slots, schema excerpts in ``snippets/`` and one-shot exemplars in
``oneshot/``. Blocks are always emitted in this order, each only when its
pattern is enabled:

    persona (system text) | task instruction | knowledge snippet |
    one-shot example | reasoning cue | template scaffold | input payload
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from typing import Mapping

from .model import STEP_KINDS

TEMPLATE_VERSION = "v1"
MIN_TOKENS = 4
DEFAULT_CONTEXT_WINDOW = 128_000
MAX_SNIPPET_CHARS = 1200

SUBTASK_KINDS = (
    "metadata",
    "workflow-skeleton",
    "step-attributes",
    "variables",
    "whole-playbook",
    "refinement",
)

_PLACEHOLDER = re.compile(r"\{\{(\w+)\}\}")


class PromptError(ValueError):
    pass


class ContextOverflow(PromptError):
    def __init__(self, est_tokens: int, window: int):
        super().__init__(f"prompt needs ~{est_tokens} tokens, context window is {window}")
        self.est_tokens = est_tokens
        self.window = window


class MissingPriorFragment(PromptError):
    pass


class UnknownStepKind(PromptError):
    pass


@dataclass(frozen=True)
class PatternSet:
    persona: bool = False
    template: bool = False
    reasoning: bool = False
    knowledge_injection: bool = False
    one_shot: bool = False

    PRESETS = ("baseline", "all", "all-no-oneshot")
    _TOKENS = {
        "persona": "persona",
        "template": "template",
        "reasoning": "reasoning",
        "reason": "reasoning",
        "knowledge": "knowledge_injection",
        "oneshot": "one_shot",
        "one-shot": "one_shot",
    }

    @classmethod
    def preset(cls, name: str) -> PatternSet:
        if name == "baseline":
            return cls()
        if name == "all":
            return cls(True, True, True, True, True)
        if name in ("all-no-oneshot", "all-without-one-shot"):
            return cls(True, True, True, True, False)
        raise ValueError(f"unknown pattern preset {name!r}")

    @classmethod
    def parse(cls, text: str) -> PatternSet:
        """Parse ``baseline|all|all-no-oneshot`` or a comma list such as ``persona,knowledge``."""
        text = text.strip()
        if text in cls.PRESETS or text == "all-without-one-shot":
            return cls.preset(text)
        flags = {}
        for token in filter(None, (t.strip() for t in text.split(","))):
            if token not in cls._TOKENS:
                raise ValueError(f"unknown prompt pattern {token!r}")
            flags[cls._TOKENS[token]] = True
        return cls(**flags)

    @property
    def label(self) -> str:
        for name in self.PRESETS:
            if self == self.preset(name):
                return name
        names = [t for t, attr in (("persona", "persona"), ("template", "template"),
                                   ("reasoning", "reasoning"), ("knowledge", "knowledge_injection"),
                                   ("oneshot", "one_shot")) if getattr(self, attr)]
        return ",".join(names)


REFINEMENT_PATTERNS = PatternSet(persona=True, template=True, reasoning=True)


@dataclass(frozen=True)
class SubTask:
    kind: str
    step_kind: str | None = None
    step_name: str | None = None
    index: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in SUBTASK_KINDS:
            raise ValueError(f"unknown sub-task {self.kind!r}")
        if self.kind == "step-attributes":
            if self.step_kind not in STEP_KINDS:
                raise UnknownStepKind(f"step-attributes needs one of the eight step kinds, got {self.step_kind!r}")
        elif self.step_kind is not None:
            raise ValueError(f"{self.kind} sub-task takes no step kind")

    def __str__(self) -> str:
        if self.kind == "step-attributes":
            return f"step-attributes[{self.index}]({self.step_kind}:{self.step_name})"
        return self.kind


@dataclass(frozen=True)
class PromptInputs:
    legacy_text: str
    prior_fragments: Mapping[str, str] = field(default_factory=dict)
    error_messages: tuple[str, ...] = ()
    analyst_notes: str | None = None


@dataclass(frozen=True)
class PromptSpec:
    system_text: str
    user_text: str
    injected_snippets: tuple[tuple[str, str], ...] = ()
    est_tokens: int = MIN_TOKENS


# ----------------------------------------------------------------- package data


def _data(*parts: str):
    ref = resources.files(__package__)
    for part in parts:
        ref = ref / part
    return ref


@lru_cache(maxsize=None)
def _template(name: str, version: str = TEMPLATE_VERSION) -> str:
    return (_data("templates", version) / name).read_text(encoding="utf-8").rstrip("\n")


def render(template: str, **values: str) -> str:
    def sub(m: re.Match) -> str:
        if m.group(1) not in values:
            raise KeyError(f"no value for placeholder {m.group(1)!r}")
        return values[m.group(1)]

    return _PLACEHOLDER.sub(sub, template)


@dataclass(frozen=True)
class SnippetLibrary:
    snippets: Mapping[str, str]
    max_chars: int = MAX_SNIPPET_CHARS

    def __post_init__(self) -> None:
        for key in STEP_KINDS + ("metadata", "variables", "skeleton"):
            if key not in self.snippets:
                raise ValueError(f"snippet library lacks {key!r}")
        for key, text in self.snippets.items():
            if len(text) > self.max_chars:
                raise ValueError(f"snippet {key!r} is longer than {self.max_chars} characters")

    @classmethod
    def load_default(cls) -> SnippetLibrary:
        return _default_library()

    def for_step(self, step_kind: str) -> str:
        if step_kind not in STEP_KINDS:
            raise UnknownStepKind(f"unknown step kind {step_kind!r}")
        return self.snippets[step_kind]


@lru_cache(maxsize=None)
def _default_library() -> SnippetLibrary:
    folder = _data("snippets")
    snippets = {
        entry.name[: -len(".txt")]: entry.read_text(encoding="utf-8").rstrip("\n")
        for entry in folder.iterdir()
        if entry.name.endswith(".txt")
    }
    return SnippetLibrary(snippets)


def select_schema_snippet(step_kind: str, library: SnippetLibrary | None = None) -> str:
    return (library or _default_library()).for_step(step_kind)


@lru_cache(maxsize=None)
def load_one_shot(task_kind: str) -> tuple[str, str]:
    """Return ``(legacy input, expected JSON output)`` for a sub-task kind."""
    raw = json.loads((_data("oneshot") / f"{task_kind}.json").read_text(encoding="utf-8"))
    return raw["legacy"], json.dumps(raw["output"], indent=2)


# ------------------------------------------------------------------- assembly


def estimate_text_tokens(text: str) -> int:
    return math.ceil(len(text) / 4)


def estimate_tokens(spec: PromptSpec) -> int:
    """Characters/4 over both texts, never below ``MIN_TOKENS``."""
    return max(MIN_TOKENS, estimate_text_tokens(spec.system_text + spec.user_text))


def _task_snippet(task: SubTask, library: SnippetLibrary) -> tuple[str, str] | None:
    if task.kind == "metadata":
        return "metadata", library.snippets["metadata"]
    if task.kind == "workflow-skeleton":
        return "skeleton", library.snippets["skeleton"]
    if task.kind == "step-attributes":
        return task.step_kind, library.for_step(task.step_kind)
    if task.kind == "variables":
        return "variables", library.snippets["variables"]
    if task.kind == "whole-playbook":
        text = "\n".join(library.snippets[k] for k in ("metadata", "skeleton", "variables"))
        return "whole-playbook", text
    return None


def _one_shot_key(task: SubTask) -> str:
    return task.kind


def build_prompt(
    task: SubTask,
    patterns: PatternSet,
    inputs: PromptInputs,
    *,
    library: SnippetLibrary | None = None,
    context_window: int = DEFAULT_CONTEXT_WINDOW,
    version: str = TEMPLATE_VERSION,
) -> PromptSpec:
    """Assemble the prompt for one sub-task under one pattern configuration."""
    if not inputs.legacy_text.strip():
        raise PromptError("legacy_text is empty")
    library = library or _default_library()
    if task.kind == "refinement":
        patterns = REFINEMENT_PATTERNS
        if "previous_transformation" not in inputs.prior_fragments:
            raise MissingPriorFragment("refinement needs the previous transformation")
    if task.kind == "step-attributes" and "workflow-skeleton" not in inputs.prior_fragments:
        raise MissingPriorFragment("step-attributes needs the workflow-skeleton fragment")

    tpl = lambda name: _template(name, version)  # noqa: E731
    blocks: list[str] = []
    snippets: list[tuple[str, str]] = []

    instruction = render(
        tpl(f"tasks/{task.kind}.txt"),
        **({"step_name": task.step_name or "", "step_kind": task.step_kind or ""}
           if task.kind == "step-attributes" else {}),
    )
    blocks.append(instruction + "\n" + tpl("json_only.txt"))

    if patterns.knowledge_injection:
        picked = _task_snippet(task, library)
        if picked is not None:
            snippets.append(picked)
            blocks.append(render(tpl("knowledge.txt"), snippet=picked[1]))
    if patterns.one_shot and task.kind != "refinement":
        example_in, example_out = load_one_shot(_one_shot_key(task))
        blocks.append(render(tpl("oneshot.txt"), example_input=example_in, example_output=example_out))
    if patterns.reasoning:
        blocks.append(tpl("reasoning.txt"))
    if patterns.template:
        scaffold = (_data("templates", version, "scaffolds") / f"{task.kind}.json").read_text(encoding="utf-8")
        blocks.append(render(tpl("scaffold.txt"), scaffold=scaffold.rstrip("\n")))

    payload = [render(tpl("payload.txt"), legacy_text=inputs.legacy_text)]
    if task.kind in ("step-attributes", "variables") and "workflow-skeleton" in inputs.prior_fragments:
        payload.append(render(tpl("prior.txt"), label="Workflow skeleton",
                              text=inputs.prior_fragments["workflow-skeleton"]))
    if task.kind == "refinement":
        payload.append(render(tpl("prior.txt"), label="Previous transformation",
                              text=inputs.prior_fragments["previous_transformation"]))
        payload.append(render(tpl("prior.txt"), label="Schema checker errors",
                              text="\n".join(inputs.error_messages) or "(none)"))
        if inputs.analyst_notes:
            payload.append(render(tpl("notes.txt"), notes=inputs.analyst_notes))
    blocks.append("\n\n".join(payload))

    spec = PromptSpec(
        system_text=tpl("persona.txt") if patterns.persona else "",
        user_text="\n\n".join(blocks) + "\n",
        injected_snippets=tuple(snippets),
    )
    spec = replace(spec, est_tokens=estimate_tokens(spec))
    if spec.est_tokens > context_window:
        raise ContextOverflow(spec.est_tokens, context_window)
    return spec
