"""Convert legacy SOAR playbooks into CACAO 2.0 JSON and score the results."""

from .backend import CachingBackend, CompletionRequest, CompletionResponse, ReplayBackend
from .ingest import LegacyDocument, load_legacy, load_manifest
from .metrics import dl_distance, dl_similarity, evaluate_pair, recall
from .model import PlaybookDocument, WorkflowStep, parse_playbook, serialize_playbook
from .pipeline import TransformConfig, TransformResult, assemble, extract_json_fragment, refine, transform
from .prompts import PatternSet, SubTask, build_prompt
from .validation import ValidationReport, avg_syn_err, validate

__version__ = "0.1.0"

__all__ = [
    "CachingBackend", "CompletionRequest", "CompletionResponse", "LegacyDocument", "PatternSet",
    "PlaybookDocument", "ReplayBackend", "SubTask", "TransformConfig", "TransformResult",
    "ValidationReport", "WorkflowStep", "assemble", "avg_syn_err", "build_prompt", "dl_distance",
    "dl_similarity", "evaluate_pair", "extract_json_fragment", "load_legacy", "load_manifest",
    "parse_playbook", "recall", "refine", "serialize_playbook", "transform", "validate",
]
