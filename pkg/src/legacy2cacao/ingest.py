"""Loading legacy playbooks and dataset manifests.

Manifest format (JSON)::

    {
      "entries": [
        {"legacy_path": "legacy/phantom_01.json",
         "reference_path": "reference/phantom_01.cacao.json",
         "vendor_hint": "phantom"}
      ]
    }

Paths are relative to the manifest's directory. ``reference_path`` is
optional; it is only required when an entry is evaluated.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

VENDORS = ("phantom", "fortinet", "demisto", "other")
_BOM = "\ufeff"


class IngestError(ValueError):
    pass


class UnreadableFile(IngestError):
    pass


class UnparseableContent(IngestError):
    def __init__(self, fmt: str, position: str, detail: str = ""):
        super().__init__(f"cannot parse as {fmt} at {position}" + (f": {detail}" if detail else ""))
        self.format = fmt
        self.position = position


class MissingFile(IngestError):
    def __init__(self, entry_index: int, path: Path):
        super().__init__(f"manifest entry {entry_index}: {path} does not exist")
        self.entry_index = entry_index
        self.path = path


class MalformedManifest(IngestError):
    pass


class MissingReference(IngestError):
    pass


@dataclass(frozen=True)
class LegacyDocument:
    raw_text: str
    format: str  # "json" | "yaml"
    parsed: Any
    vendor_hint: str | None = None
    path: Path | None = None

    @classmethod
    def from_text(cls, text: str, fmt: str | None = None, vendor_hint: str | None = None) -> LegacyDocument:
        text = text[1:] if text.startswith(_BOM) else text
        fmt, parsed = _parse(text, fmt)
        return cls(text, fmt, parsed, vendor_hint or guess_vendor(parsed))


def _parse(text: str, fmt: str | None) -> tuple[str, Any]:
    if fmt in (None, "json"):
        try:
            return "json", json.loads(text)
        except json.JSONDecodeError as exc:
            if fmt == "json":
                raise UnparseableContent("json", f"line {exc.lineno} column {exc.colno}", exc.msg) from None
    try:
        parsed = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1} column {mark.column + 1}" if mark else "unknown position"
        raise UnparseableContent("yaml", where, str(getattr(exc, "problem", exc))) from None
    if not isinstance(parsed, (dict, list)):
        raise UnparseableContent(fmt or "yaml", "document root", "expected a mapping or a list")
    return "yaml", parsed


def guess_vendor(parsed: Any) -> str | None:
    """Best-effort vendor label; advisory only, the pipeline ignores it."""
    if not isinstance(parsed, dict):
        return None
    keys = set(parsed)
    if {"tasks", "starttaskid"} <= keys:
        return "demisto"
    if "coa" in keys or "blockly" in keys:
        return "phantom"
    if "triggerStep" in keys or parsed.get("@type") == "Workflow" or "steps" in keys and "routes" in keys:
        return "fortinet"
    return None


def load_legacy(path: str | os.PathLike, vendor_hint: str | None = None) -> LegacyDocument:
    """Read a legacy playbook; format from the extension, else sniffed from content."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise UnreadableFile(f"{path}: {exc.strerror or exc}") from None
    if b"\x00" in data:
        raise UnparseableContent("text", "byte " + str(data.index(b"\x00")), "binary content")
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise UnparseableContent("text", f"byte {exc.start}", "not valid UTF-8") from None
    suffix = path.suffix.lower()
    fmt = {".json": "json", ".yml": "yaml", ".yaml": "yaml"}.get(suffix)
    doc = LegacyDocument.from_text(text, fmt, vendor_hint)
    return LegacyDocument(doc.raw_text, doc.format, doc.parsed, doc.vendor_hint, path)


@dataclass(frozen=True)
class ManifestEntry:
    legacy_path: Path
    reference_path: Path | None = None
    vendor_hint: str | None = None

    @property
    def name(self) -> str:
        return self.legacy_path.name.split(".")[0]

    def require_reference(self) -> Path:
        if self.reference_path is None:
            raise MissingReference(f"{self.legacy_path}: no reference_path for evaluation")
        return self.reference_path


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    path: Path | None = None

    def __len__(self) -> int:
        return len(self.entries)


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8-sig"))
    except OSError as exc:
        raise UnreadableFile(f"{path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise MalformedManifest(f"{path}: {exc}") from None
    items = raw.get("entries") if isinstance(raw, dict) else None
    if not isinstance(items, list):
        raise MalformedManifest(f"{path}: expected an object with an 'entries' list")
    if not items:
        raise MalformedManifest(f"{path}: dataset must contain at least one entry")
    base = path.parent
    entries = []
    for i, item in enumerate(items):
        if not isinstance(item, dict) or not isinstance(item.get("legacy_path"), str):
            raise MalformedManifest(f"{path}: entry {i} needs a 'legacy_path' string")
        vendor = item.get("vendor_hint")
        if vendor is not None and vendor not in VENDORS:
            raise MalformedManifest(f"{path}: entry {i} has unknown vendor_hint {vendor!r}")
        legacy = (base / item["legacy_path"]).resolve()
        if not legacy.exists():
            raise MissingFile(i, legacy)
        reference = None
        if item.get("reference_path") is not None:
            reference = (base / item["reference_path"]).resolve()
            if not reference.exists():
                raise MissingFile(i, reference)
        entries.append(ManifestEntry(legacy, reference, vendor))
    return DatasetManifest(tuple(entries), path)
