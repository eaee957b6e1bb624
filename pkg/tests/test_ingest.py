from __future__ import annotations

import json
import random

import pytest
import yaml

from conftest import FIXTURE_NAMES, FIXTURES, legacy_path
from legacy2cacao.ingest import (
    LegacyDocument,
    MalformedManifest,
    MissingFile,
    MissingReference,
    UnparseableContent,
    UnreadableFile,
    load_legacy,
    load_manifest,
)
from legacy2cacao.validation import avg_syn_err, validate


def test_yaml_file():
    path = legacy_path("demisto_01")
    doc = load_legacy(path)
    assert doc.format == "yaml"
    assert doc.parsed == yaml.safe_load(path.read_text(encoding="utf-8"))
    assert doc.vendor_hint == "demisto"


@pytest.mark.parametrize("name", FIXTURE_NAMES)
def test_raw_text_round_trips(name):
    path = legacy_path(name)
    assert load_legacy(path).raw_text.encode("utf-8") == path.read_bytes()


def test_json_with_bom(tmp_path):
    path = tmp_path / "bom.json"
    path.write_bytes(b"\xef\xbb\xbf" + b'{"name": "x"}')
    doc = load_legacy(path)
    assert doc.parsed == {"name": "x"}
    assert not doc.raw_text.startswith("﻿")
    assert doc.raw_text.encode("utf-8") == b'{"name": "x"}'


def test_binary_file(tmp_path):
    path = tmp_path / "blob.json"
    path.write_bytes(bytes(range(256)))
    with pytest.raises(UnparseableContent):
        load_legacy(path)


def test_invalid_utf8(tmp_path):
    path = tmp_path / "latin.yml"
    path.write_bytes(b"name: caf\xe9\n")
    with pytest.raises(UnparseableContent):
        load_legacy(path)


def test_bad_json_reports_position(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "a": }', encoding="utf-8")
    with pytest.raises(UnparseableContent) as info:
        load_legacy(path)
    assert info.value.format == "json" and "line 2" in info.value.position


def test_sniffs_format_without_extension(tmp_path):
    as_json = tmp_path / "one.txt"
    as_json.write_text('{"tasks": {}, "starttaskid": "0"}', encoding="utf-8")
    as_yaml = tmp_path / "two.txt"
    as_yaml.write_text("tasks: {}\nstarttaskid: '0'\n", encoding="utf-8")
    assert load_legacy(as_json).format == "json"
    assert load_legacy(as_yaml).format == "yaml"
    assert load_legacy(as_json).parsed == load_legacy(as_yaml).parsed


def test_scalar_document_is_rejected():
    with pytest.raises(UnparseableContent):
        LegacyDocument.from_text("just words")


def test_unreadable(tmp_path):
    with pytest.raises(UnreadableFile):
        load_legacy(tmp_path / "absent.json")


def test_explicit_vendor_hint_wins():
    assert load_legacy(legacy_path("phantom_01"), "other").vendor_hint == "other"


def write_manifest(tmp_path, entries):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"entries": entries}), encoding="utf-8")
    return path


def test_manifest_resolves_relative_paths(tmp_path):
    (tmp_path / "data").mkdir()
    for name in ("a", "b", "c"):
        (tmp_path / "data" / f"{name}.json").write_text("{}", encoding="utf-8")
    path = write_manifest(tmp_path, [{"legacy_path": f"data/{n}.json"} for n in ("a", "b", "c")])
    manifest = load_manifest(path)
    assert len(manifest) == 3
    assert [e.name for e in manifest.entries] == ["a", "b", "c"]
    assert manifest.entries[0].legacy_path == (tmp_path / "data" / "a.json").resolve()


def test_fixture_manifest():
    manifest = load_manifest(FIXTURES / "manifest.json")
    assert [e.name for e in manifest.entries] == list(FIXTURE_NAMES)
    assert sum(e.reference_path is not None for e in manifest.entries) == 4


def test_missing_file(tmp_path):
    (tmp_path / "a.json").write_text("{}", encoding="utf-8")
    path = write_manifest(tmp_path, [{"legacy_path": "a.json"}, {"legacy_path": "gone.json"}])
    with pytest.raises(MissingFile) as info:
        load_manifest(path)
    assert info.value.entry_index == 1


@pytest.mark.parametrize("content", ['{"entries": []}', "[]", '{"entries": [{"path": "x"}]}', "{not json",
                                     '{"entries": [{"legacy_path": "a.json", "vendor_hint": "splunk"}]}'])
def test_malformed_manifest(tmp_path, content):
    (tmp_path / "a.json").write_text("{}", encoding="utf-8")
    path = tmp_path / "manifest.json"
    path.write_text(content, encoding="utf-8")
    with pytest.raises(MalformedManifest):
        load_manifest(path)


def test_missing_reference_is_lazy(tmp_path):
    (tmp_path / "a.json").write_text("{}", encoding="utf-8")
    manifest = load_manifest(write_manifest(tmp_path, [{"legacy_path": "a.json"}]))
    with pytest.raises(MissingReference):
        manifest.entries[0].require_reference()


def test_aggregates_ignore_order():
    reports = [validate(p.read_text(encoding="utf-8")) for p in sorted((FIXTURES / "refine").glob("*.json"))]
    reports += [validate("{}"), validate("[")]
    expected = avg_syn_err(reports)
    rng = random.Random(1)
    for _ in range(10):
        rng.shuffle(reports)
        assert avg_syn_err(reports) == expected
