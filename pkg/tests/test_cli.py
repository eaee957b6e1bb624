from __future__ import annotations

import io
import json

import jsonschema
import pytest
from referencing import Registry, Resource

from conftest import FIXTURES, ROOT, legacy_path
from legacy2cacao.backend import CachingBackend, CallableBackend, CompletionRequest, ReplayBackend
from legacy2cacao.cli import Settings, build_parser, run
from legacy2cacao.ingest import load_legacy
from legacy2cacao.model import parse_playbook
from legacy2cacao.pipeline import FIXED_TIMESTAMP, TransformConfig, transform

SCHEMAS = json.loads((ROOT / "docs" / "report-schemas.json").read_text(encoding="utf-8"))
REGISTRY = Registry().with_resource("urn:reports", Resource.from_contents(SCHEMAS))
REFERENCE = str(FIXTURES / "reference" / "phantom_01.cacao.json")


def cassette(name: str) -> str:
    return str(FIXTURES / "cassettes" / f"{name}.json")


def check_schema(obj, name: str) -> None:
    schema = {"$schema": SCHEMAS.get("$schema"), "$ref": f"urn:reports#/$defs/{name}"}
    jsonschema.Draft202012Validator(schema, registry=REGISTRY).validate(obj)


def run_json(capsys, argv):
    code = run(argv)
    out = capsys.readouterr().out
    return code, json.loads(out)


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ("BACKEND", "CASSETTE", "CACHE", "PRICING", "URL", "MODEL", "SCHEMA_SET", "TIMESTAMP"):
        monkeypatch.delenv(f"LEGACY2CACAO_{name}", raising=False)


# ------------------------------------------------------------------- validate


def test_validate_clean(capsys):
    assert run(["validate", REFERENCE]) == 0
    assert capsys.readouterr().out.startswith("0 issues")


def test_validate_with_issues(capsys):
    path = str(FIXTURES / "refine" / "candidate_3.json")
    assert run(["validate", path]) == 1
    out = capsys.readouterr().out
    assert out.startswith("3 issues")
    assert "/created: [pattern-violation]" in out


def test_validate_json_report(capsys):
    paths = [REFERENCE, str(FIXTURES / "refine" / "candidate_5.json")]
    code, body = run_json(capsys, ["--json", "validate", *paths])
    assert code == 1
    check_schema(body, "validate_report")
    assert body["avg_syn_err"] == "2.50"


def test_validate_missing_file(capsys, tmp_path):
    assert run(["validate", str(tmp_path / "absent.json")]) == 2


# ------------------------------------------------------------------ transform


def test_transform_replay_writes_clean_playbook(tmp_path, capsys):
    out = tmp_path / "out.cacao.json"
    trace = tmp_path / "trace.json"
    code = run(["transform", "--input", str(legacy_path("phantom_01")), "--cassette", cassette("phantom_01"),
                "--out", str(out), "--trace", str(trace)])
    assert code == 0
    assert run(["validate", str(out)]) == 0
    assert "0 issues" in capsys.readouterr().out
    assert json.loads(trace.read_text())["refinement_trace"] == [{"iteration": 0, "syntax_err_count": 0}]
    expected = transform(load_legacy(legacy_path("phantom_01")), TransformConfig(timestamp=FIXED_TIMESTAMP),
                         ReplayBackend.from_file(cassette("phantom_01")))
    assert out.read_text(encoding="utf-8") == expected.playbook_text


def test_transform_json_report(capsys, tmp_path):
    code, body = run_json(capsys, [
        "--json", "transform", "--input", str(legacy_path("phantom_01")), "--cassette", cassette("phantom_01"),
        "--pricing", str(FIXTURES / "pricing.json"), "--out", str(tmp_path / "o.json"),
    ])
    assert code == 0
    check_schema(body, "transform_report")
    assert body["completions"] == 6
    assert body["usage"]["total"]["cost_usd"] is not None


def test_transform_whole_playbook(capsys):
    code = run(["transform", "--input", str(legacy_path("phantom_01")), "--cassette", cassette("phantom_01"),
                "--no-decompose"])
    assert code == 0
    assert parse_playbook(capsys.readouterr().out).name


def test_transform_several_inputs_need_directory(capsys):
    argv = ["transform", "--input", str(legacy_path("phantom_01")), str(legacy_path("phantom_02")),
            "--cassette", cassette("batch")]
    assert run(argv) == 2


def test_transform_several_inputs(tmp_path):
    argv = ["--out", str(tmp_path), "--jobs", "2", "transform", "--input", str(legacy_path("phantom_01")),
            str(legacy_path("demisto_01")), "--cassette", cassette("batch")]
    assert run(argv) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["demisto_01.cacao.json", "phantom_01.cacao.json"]


def test_replay_miss_is_backend_error(capsys):
    argv = ["transform", "--input", str(legacy_path("phantom_01")), "--cassette", cassette("phantom_02")]
    assert run(argv) == 3
    assert "backend error" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["transform"],
    ["transform", "--input", "x.json", "--patterns", "magic", "--cassette", "c.json"],
    ["transform", "--input", "x.json", "--max-refine", "-1"],
    ["transform", "--input", "x.json", "--backend", "replay"],
    ["frobnicate"],
    [],
])
def test_usage_errors(argv, capsys):
    assert run(argv) == 2


def test_remote_without_url(capsys):
    argv = ["transform", "--input", str(legacy_path("phantom_01")), "--backend", "remote"]
    assert run(argv) == 2


# --------------------------------------------------------------------- refine


def test_refine_fix3(tmp_path, capsys):
    out = tmp_path / "fixed.json"
    code, body = run_json(capsys, [
        "--json", "--out", str(out), "refine", "--input", str(legacy_path("phantom_02")),
        "--candidate", str(FIXTURES / "refine" / "candidate_3.json"), "--cassette", cassette("refine_fix3"),
    ])
    assert code == 0
    assert [t["syntax_err_count"] for t in body["refinement_trace"]] == [3, 2, 1, 0]
    check_schema(body, "transform_report")


def test_refine_nofix_exits_one(capsys):
    code = run(["refine", "--input", str(legacy_path("phantom_02")),
                "--candidate", str(FIXTURES / "refine" / "candidate_3.json"), "--cassette", cassette("refine_nofix")])
    assert code == 1


def test_interactive_review_changes_prompt(monkeypatch, capsys):
    # Notes change the refinement prompt, so the recorded cassette no longer matches.
    monkeypatch.setattr("sys.stdin", io.StringIO("Keep the original name\n"))
    code = run(["refine", "--input", str(legacy_path("phantom_02")), "--interactive-review",
                "--candidate", str(FIXTURES / "refine" / "candidate_3.json"), "--cassette", cassette("refine_fix3")])
    err = capsys.readouterr().err
    assert "iteration 1: 3 issues" in err
    assert code == 3


def test_interactive_review_blank_line_continues(monkeypatch, capsys):
    monkeypatch.setattr("sys.stdin", io.StringIO("\n\n\n"))
    code = run(["refine", "--input", str(legacy_path("phantom_02")), "--interactive-review",
                "--candidate", str(FIXTURES / "refine" / "candidate_3.json"), "--cassette", cassette("refine_fix3")])
    assert code == 0
    assert capsys.readouterr().err.count("analyst notes") == 3


# ------------------------------------------------------------------- evaluate


def test_evaluate_self(capsys):
    code, body = run_json(capsys, ["--json", "evaluate", "--generated", REFERENCE, "--reference", REFERENCE])
    assert code == 0
    check_schema(body, "evaluate_report")
    assert (body["metadata_accuracy"], body["workflow_field_accuracy"], body["variables_accuracy"]) == (1.0, 1.0, 1.0)
    assert body["ged"]["normalized"] == 0.0


def test_evaluate_text_and_threshold(tmp_path, capsys):
    out = tmp_path / "gen.json"
    run(["transform", "--input", str(legacy_path("phantom_01")), "--cassette", cassette("phantom_01"),
         "--out", str(out)])
    capsys.readouterr()
    assert run(["evaluate", "--generated", str(out), "--reference", REFERENCE]) == 0
    assert "ged_normalized           0.1000" in capsys.readouterr().out
    assert run(["evaluate", "--generated", str(out), "--reference", REFERENCE, "--max-ged", "0.05"]) == 1


def test_evaluate_rejects_non_playbook(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("[]", encoding="utf-8")
    assert run(["evaluate", "--generated", str(bad), "--reference", REFERENCE]) == 2


# ----------------------------------------------------------------- batch-eval


def test_batch_eval(capsys):
    code, body = run_json(capsys, [
        "--json", "batch-eval", "--manifest", str(FIXTURES / "manifest.json"), "--cassette", cassette("batch"),
        "--pricing", str(FIXTURES / "pricing.json"),
    ])
    assert code == 0
    check_schema(body, "batch_eval_report")
    rows = {r["preset"]: r for r in body["rows"]}
    assert set(rows) == {"baseline", "all", "all-no-oneshot"}
    assert all(r["playbooks"] == 6 and r["evaluated"] == 4 for r in rows.values())
    assert rows["baseline"]["avg_syn_err_initial"] == "1.00"
    assert all(r["avg_syn_err"] == "0.00" for r in rows.values())


def test_batch_eval_table(capsys):
    code = run(["batch-eval", "--manifest", str(FIXTURES / "manifest.json"), "--cassette", cassette("batch"),
                "--presets", "all"])
    assert code == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split()[:2] == ["preset", "playbooks"]
    assert lines[1].startswith("all ")


# ---------------------------------------------------------------------- cache


def test_cache_stats_and_clear(tmp_path, capsys):
    db = tmp_path / "cache.sqlite"
    CachingBackend(CallableBackend(lambda req: "{}"), db).complete(CompletionRequest("m", "", "x"))
    code, body = run_json(capsys, ["--json", "cache", "stats", "--cache", str(db)])
    assert code == 0 and body["entries"] == 1
    check_schema(body, "cache_report")
    code, body = run_json(capsys, ["--json", "cache", "clear", "--cache", str(db)])
    assert body == {"removed": 1}
    assert run(["cache", "stats"]) == 2


def test_cache_through_without_remote(tmp_path, capsys):
    argv = ["transform", "--input", str(legacy_path("phantom_01")), "--backend", "cache-through",
            "--cache", str(tmp_path / "c.sqlite")]
    assert run(argv) == 3


# --------------------------------------------------------------------- config


def settings(argv):
    return Settings(build_parser().parse_args(argv))


def test_config_precedence(tmp_path, monkeypatch):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"model": "from-file", "schema_set": "strict", "cache": "file.sqlite"}))
    base = ["--config", str(config), "cache", "stats"]
    assert settings(base).get("model") == "from-file"
    monkeypatch.setenv("LEGACY2CACAO_MODEL", "from-env")
    assert settings(base).get("model") == "from-env"
    flagged = ["--config", str(config), "transform", "--input", "x", "--model", "from-flag"]
    assert settings(flagged).get("model") == "from-flag"
    assert settings(base).get("schema_set") == "strict"
    assert settings(["--schema-set", "patched", "--config", str(config), "cache", "stats"]).get("schema_set") == "patched"
    assert settings(["cache", "stats"]).get("backend") == "replay"


def test_global_options_before_or_after_subcommand():
    before = build_parser().parse_args(["--json", "validate", "a"])
    after = build_parser().parse_args(["validate", "a", "--json"])
    assert before.json and after.json


def test_bad_config_file(tmp_path):
    config = tmp_path / "config.json"
    config.write_text("[1]")
    assert run(["--config", str(config), "validate", REFERENCE]) == 2


def test_help_exits_zero(capsys):
    assert run(["--help"]) == 0
