from __future__ import annotations

import copy
import json

import pytest

from build_fixtures import Responder
from conftest import FIXTURE_NAMES, FIXTURES, legacy_path
from legacy2cacao.backend import CallableBackend, ReplayBackend, ReplayMiss
from legacy2cacao.ingest import load_legacy
from legacy2cacao.model import serialize_playbook
from legacy2cacao.pipeline import (
    FIXED_TIMESTAMP,
    FragmentUnparseable,
    NoJsonFound,
    SkeletonAttributeMismatch,
    TransformConfig,
    assemble,
    extract_json_fragment,
    refine,
    transform,
    transform_many,
)
from legacy2cacao.prompts import PatternSet, SubTask
from legacy2cacao.validation import validate


def cfg(**kwargs) -> TransformConfig:
    kwargs.setdefault("timestamp", FIXED_TIMESTAMP)
    return TransformConfig(**kwargs)


def script(name: str) -> dict:
    return json.loads((FIXTURES / "scripts" / f"{name}.json").read_text(encoding="utf-8"))


def legacy(name: str):
    return load_legacy(legacy_path(name))


def replay(name: str) -> ReplayBackend:
    return ReplayBackend.from_file(FIXTURES / "cassettes" / f"{name}.json")


# ------------------------------------------------------------ fragment parsing


@pytest.mark.parametrize("text,expected", [
    ('Sure!\n```json\n{"name": "Block IP"}\n```\n', '{"name": "Block IP"}'),
    ('The result is {"a": 1} as requested.', '{"a": 1}'),
    ('{"a": "}"} trailing', '{"a": "}"}'),
    ('noise {not json} then {"b": [1, {"c": 2}]}', '{"b": [1, {"c": 2}]}'),
    ('```\n{"x": 1}\n```', '{"x": 1}'),
    ('{"outer": 1} and ```json\n{"fenced": 2}\n```', '{"fenced": 2}'),
])
def test_extract_json_fragment(text, expected):
    assert extract_json_fragment(text) == expected


@pytest.mark.parametrize("text", ["no json here", "", "[1, 2]", "{broken"])
def test_extract_json_fragment_fails(text):
    with pytest.raises(NoJsonFound):
        extract_json_fragment(text)


# ------------------------------------------------------------------- assembly


def fragments_for(name: str, **overrides) -> dict:
    s = copy.deepcopy(script(name))
    s.update(overrides)
    out = {
        SubTask("metadata"): json.dumps(s["metadata"]),
        SubTask("workflow-skeleton"): json.dumps(s["skeleton"]),
        SubTask("variables"): json.dumps(s["variables"]),
    }
    for i, step in enumerate(s["skeleton"]["steps"]):
        task = SubTask("step-attributes", step["type"], step["name"], i)
        out[task] = json.dumps(s["steps"][step["name"]])
    return out


def test_assemble_three_steps():
    doc = assemble(fragments_for("phantom_01"), timestamp=FIXED_TIMESTAMP)
    assert len(doc.workflow) == 3
    assert doc.workflow[doc.workflow_start].kind == "start"
    kinds = {s.name: k.split("--")[0] for k, s in doc.workflow.items()}
    assert kinds == {"Start": "start", "Block IP Address": "action", "End": "end"}
    block = next(s for s in doc.workflow.values() if s.kind == "action")
    assert doc.workflow[block.on_completion].name == "End"
    assert doc.created == FIXED_TIMESTAMP


def test_assemble_empty_variables():
    doc = assemble(fragments_for("phantom_01", variables={}))
    assert doc.playbook_variables == {}


def test_assemble_is_deterministic():
    assert assemble(fragments_for("phantom_02")) == assemble(fragments_for("phantom_02"))
    assert assemble(fragments_for("phantom_02"), id_seed=1) != assemble(fragments_for("phantom_02"), id_seed=2)


def test_assembled_fixtures_validate():
    for name in FIXTURE_NAMES:
        doc = assemble(fragments_for(name))
        assert validate(serialize_playbook(doc)).ok, name


def test_attributes_for_unknown_step():
    frags = fragments_for("phantom_01")
    task = next(t for t in frags if t.kind == "step-attributes" and t.step_kind == "action")
    frags[task] = json.dumps({"name": "Quarantine Host", "on_completion": "End"})
    with pytest.raises(SkeletonAttributeMismatch) as info:
        assemble(frags)
    assert info.value.step_name == "Quarantine Host"


def test_case_insensitive_step_match():
    frags = fragments_for("phantom_01")
    task = next(t for t in frags if t.kind == "step-attributes" and t.step_kind == "action")
    frags[task] = json.dumps({"name": "block ip address", "description": "lower", "on_completion": "end"})
    doc = assemble(frags)
    block = next(s for s in doc.workflow.values() if s.kind == "action")
    assert block.description == "lower"
    assert doc.workflow[block.on_completion].kind == "end"


def test_unparseable_fragment():
    frags = fragments_for("phantom_01")
    frags[SubTask("metadata")] = "[1, 2]"
    with pytest.raises(FragmentUnparseable):
        assemble(frags)


# ------------------------------------------------------------------ transform


def test_call_counts():
    backend = replay("phantom_01")
    transform(legacy("phantom_01"), cfg(), backend)
    assert len(backend.calls) == 6
    backend = replay("phantom_01")
    transform(legacy("phantom_01"), cfg(decompose=False), backend)
    assert len(backend.calls) == 1


def test_transform_phantom_01_clean():
    result = transform(legacy("phantom_01"), cfg(), replay("phantom_01"))
    assert result.validation.ok
    assert [(t.iteration, t.syntax_err_count) for t in result.refinement_trace] == [(0, 0)]
    assert len(result.fragments) == 6
    assert result.usage.total.tokens_in == sum(r.tokens_in for r in result.responses)


@pytest.mark.parametrize("name", FIXTURE_NAMES)
def test_replay_is_byte_identical(name):
    runs = [transform(legacy(name), cfg(), replay(name)) for _ in range(2)]
    assert runs[0].playbook_text == runs[1].playbook_text
    assert runs[0].trace_dict() == runs[1].trace_dict()


def test_decomposed_and_whole_agree():
    a = transform(legacy("phantom_02"), cfg(), replay("phantom_02"))
    b = transform(legacy("phantom_02"), cfg(decompose=False), replay("phantom_02"))
    assert a.playbook == b.playbook


def test_replay_miss_for_other_patterns():
    with pytest.raises(ReplayMiss):
        transform(legacy("phantom_01"), cfg(patterns=PatternSet.parse("persona")), replay("phantom_01"))


def test_completion_without_json():
    backend = CallableBackend(lambda req: "I cannot help with that.")
    with pytest.raises(FragmentUnparseable):
        transform(legacy("phantom_01"), cfg(), backend)


def test_degraded_run_is_refined():
    backend = CallableBackend(Responder(script("phantom_02"), degrade=True))
    result = transform(legacy("phantom_02"), cfg(patterns=PatternSet()), backend)
    trace = [t.syntax_err_count for t in result.refinement_trace]
    assert trace[0] > 0 and trace[-1] == 0
    assert result.validation.ok


def test_transform_many_matches_sequential():
    docs = [legacy(n) for n in ("phantom_01", "phantom_02", "fortinet_01")]
    backend = ReplayBackend.from_file(FIXTURES / "cassettes" / "batch.json")
    sequential = transform_many(docs, cfg(), backend, jobs=1)
    parallel = transform_many(docs, cfg(), backend, jobs=3)
    assert [r.playbook_text for r in sequential] == [r.playbook_text for r in parallel]


# ----------------------------------------------------------------- refinement


def candidate(n: int) -> str:
    return (FIXTURES / "refine" / f"candidate_{n}.json").read_text(encoding="utf-8")


@pytest.mark.parametrize("cassette,n,expected", [
    ("refine_fix3", 3, [3, 2, 1, 0]),
    ("refine_fix5", 5, [5, 4, 3, 2, 1, 0]),
    ("refine_nofix", 3, [3, 3, 3, 3, 3, 3]),
])
def test_refinement_traces(cassette, n, expected):
    result = refine(legacy("phantom_02"), candidate(n), None, cfg(), replay(cassette))
    assert [t.syntax_err_count for t in result.refinement_trace] == expected
    assert [t.iteration for t in result.refinement_trace] == list(range(len(expected)))
    assert result.validation.syntax_err_count == expected[-1]


def test_refinement_of_clean_candidate_makes_no_calls():
    clean = (FIXTURES / "reference" / "phantom_02.cacao.json").read_text(encoding="utf-8")
    backend = ReplayBackend.from_file(FIXTURES / "cassettes" / "refine_fix3.json")
    result = refine(legacy("phantom_02"), clean, None, cfg(), backend)
    assert [(t.iteration, t.syntax_err_count) for t in result.refinement_trace] == [(0, 0)]
    assert backend.calls == []


def test_refinement_respects_iteration_cap():
    result = refine(legacy("phantom_02"), candidate(5), None, cfg(max_refine_iterations=2), replay("refine_fix5"))
    assert [t.syntax_err_count for t in result.refinement_trace] == [5, 4, 3]


def test_refinement_keeps_best_candidate():
    worse = json.loads(candidate(3))
    worse.pop("workflow_start")
    responses = iter([json.dumps(worse)])
    backend = CallableBackend(lambda req: next(responses, candidate(3)))
    result = refine(legacy("phantom_02"), candidate(3), None, cfg(max_refine_iterations=2), backend)
    counts = [t.syntax_err_count for t in result.refinement_trace]
    assert counts[1] > counts[0]
    assert result.validation.syntax_err_count == min(counts)


def test_partial_trace_on_backend_error():
    backend = ReplayBackend.from_file(FIXTURES / "cassettes" / "refine_fix5.json")
    with pytest.raises(ReplayMiss) as info:
        refine(legacy("phantom_02"), candidate(3), None, cfg(), backend)
    assert [(t.iteration, t.syntax_err_count) for t in info.value.partial_trace] == [(0, 3)]


def test_review_hook_adds_notes():
    seen = []
    backend = CallableBackend(lambda req: (seen.append(req.user_text), candidate(3))[1])
    calls = []

    def review(iteration, report):
        calls.append((iteration, report.syntax_err_count))
        return "Keep the name field"

    refine(legacy("phantom_02"), candidate(3), None, cfg(max_refine_iterations=2), backend, review=review)
    assert calls == [(1, 3), (2, 3)]
    assert all("Keep the name field" in text for text in seen)


def test_config_validation():
    with pytest.raises(ValueError):
        TransformConfig(max_refine_iterations=-1)
    with pytest.raises(ValueError):
        TransformConfig(ged_edge_mode="some")
