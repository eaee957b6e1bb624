"""Regenerate the shipped cassettes from the scripted responses.

Each cassette is recorded by running the real pipeline against a scripted
stand-in for the model, so prompts and fingerprints always match the current
templates. Rerun after any prompt or template change:

    python3 tools/build_fixtures.py
"""

from __future__ import annotations

import copy
import json
import re
import sys
from pathlib import Path

from legacy2cacao.backend import CallableBackend, Cassette, CompletionRequest, RecordingBackend
from legacy2cacao.ingest import load_legacy
from legacy2cacao.model import serialize_playbook
from legacy2cacao.pipeline import FIXED_TIMESTAMP, TransformConfig, canonical_text, refine, transform
from legacy2cacao.prompts import PatternSet
from legacy2cacao.validation import validate

ROOT = Path(__file__).resolve().parent.parent / "fixtures"
FIXTURES = ("phantom_01", "phantom_02", "fortinet_01", "fortinet_02", "demisto_01", "demisto_02")
PRESETS = ("baseline", "all", "all-no-oneshot")

# Ordered (pointer, value) corruptions of the phantom_02 reference; each one
# yields exactly one validation issue. None deletes the member.
CORRUPTIONS = [
    ("/created", "2024-13-01"),
    ("/spec_version", "cacao-1.1"),
    ("/playbook_variables/__url__/type", None),
    ("/name", None),
    ("/workflow_start", "start"),
]


def legacy_path(name: str) -> Path:
    for suffix in (".json", ".yml"):
        path = ROOT / "legacy" / f"{name}{suffix}"
        if path.exists():
            return path
    raise FileNotFoundError(name)


def fenced(obj) -> str:
    return "Here is the fragment.\n```json\n" + json.dumps(obj, indent=2) + "\n```\n"


def previous_transformation(user_text: str) -> str:
    body = user_text.split("\nPrevious transformation:\n", 1)[1]
    return body.split("\n\nSchema checker errors:\n", 1)[0]


class Responder:
    """Answers each sub-task from a script; ``degrade`` mimics a weaker prompt."""

    def __init__(self, script: dict, whole: dict | None = None, degrade: bool = False):
        self.script = script
        self.whole = whole
        self.degrade = degrade

    def __call__(self, req: CompletionRequest) -> str:
        u = req.user_text
        s = self.script
        if u.startswith("Extract the playbook metadata"):
            meta = dict(s["metadata"])
            if self.degrade:
                meta.pop("playbook_activities", None)
            return fenced(meta)
        if u.startswith("List every step"):
            return fenced(s["skeleton"])
        if u.startswith("Describe the workflow step"):
            name = re.match(r'Describe the workflow step "([^"]+)"', u).group(1)
            attrs = dict(s["steps"][name])
            if self.degrade:
                attrs.pop("description", None)
            return fenced(attrs)
        if u.startswith("Collect the playbook variables"):
            variables = copy.deepcopy(s["variables"])
            if self.degrade:
                for var in variables.values():
                    var.pop("type", None)
            return fenced(variables)
        if u.startswith("Translate the entire legacy playbook"):
            return fenced(self.whole)
        if u.startswith("The CACAO 2.0 playbook below"):
            # Restore the variable types the degraded variables fragment dropped.
            doc = json.loads(previous_transformation(u))
            for name, var in doc.get("playbook_variables", {}).items():
                var.setdefault("type", s["variables"][name]["type"])
            return fenced(doc)
        raise AssertionError(f"unrecognized prompt: {u[:60]!r}")


def _pointer_set(doc: dict, pointer: str, value) -> None:
    *parents, last = pointer.strip("/").split("/")
    for part in parents:
        doc = doc[part]
    if value is None:
        doc.pop(last, None)
    else:
        doc[last] = value


def _pointer_get(doc: dict, pointer: str):
    for part in pointer.strip("/").split("/"):
        if not isinstance(doc, dict) or part not in doc:
            return None
        doc = doc[part]
    return doc


def corrupted(reference: dict, count: int) -> dict:
    doc = copy.deepcopy(reference)
    for pointer, value in CORRUPTIONS[:count]:
        _pointer_set(doc, pointer, value)
    return doc


class FixOne:
    """Repairs exactly one seeded corruption per round, in seeding order."""

    def __init__(self, reference: dict, fix: bool = True):
        self.reference = reference
        self.fix = fix

    def __call__(self, req: CompletionRequest) -> str:
        doc = json.loads(previous_transformation(req.user_text))
        if self.fix:
            for pointer, _ in CORRUPTIONS:
                good = _pointer_get(self.reference, pointer)
                if _pointer_get(doc, pointer) != good:
                    _pointer_set(doc, pointer, good)
                    break
        return fenced(doc)


def record(path: Path, responder, jobs) -> list:
    path.unlink(missing_ok=True)
    recorder = RecordingBackend(CallableBackend(responder), path)
    return [job(recorder) for job in jobs]


def config(patterns: str = "all", decompose: bool = True, max_refine: int = 5) -> TransformConfig:
    return TransformConfig(
        patterns=PatternSet.parse(patterns),
        decompose=decompose,
        max_refine_iterations=max_refine,
        timestamp=FIXED_TIMESTAMP,
    )


def build_golden() -> None:
    for name in FIXTURES:
        script = json.loads((ROOT / "scripts" / f"{name}.json").read_text())
        legacy = load_legacy(legacy_path(name))
        out = ROOT / "cassettes" / f"{name}.json"
        responder = Responder(script)
        [decomposed] = record(out, responder, [lambda b: transform(legacy, config(), b)])
        assert decomposed.validation.ok, (name, decomposed.validation.messages())
        whole = json.loads(decomposed.playbook_text)
        for key in ("type", "spec_version", "id", "created", "modified"):
            whole.pop(key)
        responder.whole = whole
        cassette = Cassette.load(out)
        recorder = RecordingBackend(CallableBackend(responder), out, cassette)
        single = transform(legacy, config(decompose=False), recorder)
        assert single.validation.ok, (name, single.validation.messages())
        print(f"{out.name}: {len(cassette.entries)} interactions")


def build_batch() -> None:
    out = ROOT / "cassettes" / "batch.json"
    out.unlink(missing_ok=True)
    cassette = Cassette()
    for name in FIXTURES:
        script = json.loads((ROOT / "scripts" / f"{name}.json").read_text())
        legacy = load_legacy(legacy_path(name))
        for preset in PRESETS:
            responder = Responder(script, degrade=preset == "baseline")
            recorder = RecordingBackend(CallableBackend(responder), out, cassette)
            result = transform(legacy, config(preset), recorder)
            assert result.validation.ok, (name, preset, result.validation.messages())
    print(f"{out.name}: {len(cassette.entries)} interactions")


def build_refine() -> None:
    reference = json.loads((ROOT / "reference" / "phantom_02.cacao.json").read_text())
    legacy = load_legacy(legacy_path("phantom_02"))
    (ROOT / "refine").mkdir(exist_ok=True)
    for count in (3, 5):
        candidate = canonical_text(corrupted(reference, count))
        n = validate(candidate).syntax_err_count
        assert n == count, (count, validate(candidate).messages())
        (ROOT / "refine" / f"candidate_{count}.json").write_text(candidate, encoding="utf-8")
        out = ROOT / "cassettes" / f"refine_fix{count}.json"
        [result] = record(out, FixOne(reference), [lambda b: refine(legacy, candidate, None, config(), b)])
        print(f"{out.name}: trace {[t.syntax_err_count for t in result.refinement_trace]}")
    candidate = (ROOT / "refine" / "candidate_3.json").read_text(encoding="utf-8")
    out = ROOT / "cassettes" / "refine_nofix.json"
    [result] = record(out, FixOne(reference, fix=False), [lambda b: refine(legacy, candidate, None, config(), b)])
    print(f"{out.name}: trace {[t.syntax_err_count for t in result.refinement_trace]}")


def main() -> int:
    (ROOT / "cassettes").mkdir(exist_ok=True)
    build_golden()
    build_batch()
    build_refine()
    return 0


if __name__ == "__main__":
    sys.exit(main())
