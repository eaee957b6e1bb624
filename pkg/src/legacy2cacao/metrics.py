"""Semantic-fidelity scores between a generated and a reference playbook."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from .ged import GedResult, graph_edit_distance
from .model import PlaybookDocument, build_workflow_graph


class EmptyFieldSet(ValueError):
    pass


def dl_distance(a: str, b: str) -> int:
    """Unrestricted Damerau-Levenshtein distance (Lowrance-Wagner).

    Unlike optimal string alignment, a transposed pair may be edited further,
    so ``dl_distance("ca", "abc") == 2``.
    """
    if a == b:
        return 0
    la, lb = len(a), len(b)
    if not la or not lb:
        return la + lb
    inf = la + lb
    d = [[0] * (lb + 2) for _ in range(la + 2)]
    d[0][0] = inf
    for i in range(la + 1):
        d[i + 1][0] = inf
        d[i + 1][1] = i
    for j in range(lb + 1):
        d[0][j + 1] = inf
        d[1][j + 1] = j
    last_row: dict[str, int] = {}
    for i in range(1, la + 1):
        last_match_col = 0
        for j in range(1, lb + 1):
            i1 = last_row.get(b[j - 1], 0)
            j1 = last_match_col
            if a[i - 1] == b[j - 1]:
                cost = 0
                last_match_col = j
            else:
                cost = 1
            d[i + 1][j + 1] = min(
                d[i][j] + cost,
                d[i + 1][j] + 1,
                d[i][j + 1] + 1,
                d[i1][j1] + (i - i1 - 1) + 1 + (j - j1 - 1),
            )
        last_row[a[i - 1]] = i
    return d[la + 1][lb + 1]


def dl_similarity(a: str, b: str) -> float:
    """``1 - D(a, b) / max(|a|, |b|)``, and 0 when either string is empty."""
    if not a or not b:
        return 0.0
    return 1.0 - dl_distance(a, b) / max(len(a), len(b))


def recall(truth: Iterable[str], generated: Iterable[str]) -> float:
    """TP / (TP + FN). An empty truth set scores 1.0."""
    truth, generated = set(truth), set(generated)
    if not truth:
        return 1.0
    return len(truth & generated) / len(truth)


@dataclass(frozen=True)
class FieldComparison:
    field_path: str
    field_kind: str  # "string" | "vocabulary"
    ground_truth: Any
    generated: Any
    score: float = field(init=False)

    def __post_init__(self) -> None:
        if self.field_kind == "string":
            score = dl_similarity(self.ground_truth or "", self.generated or "")
        elif self.field_kind == "vocabulary":
            score = recall(self.ground_truth or (), self.generated or ())
        else:
            raise ValueError(f"unknown field kind {self.field_kind!r}")
        object.__setattr__(self, "score", score)

    def to_dict(self) -> dict[str, Any]:
        def plain(v: Any) -> Any:
            return sorted(v) if isinstance(v, (set, frozenset, tuple)) else v

        return {
            "field_path": self.field_path,
            "field_kind": self.field_kind,
            "ground_truth": plain(self.ground_truth),
            "generated": plain(self.generated),
            "score": self.score,
        }


def field_accuracy(comparisons: Sequence[FieldComparison]) -> float:
    if not comparisons:
        raise EmptyFieldSet("accuracy over an empty field set is undefined")
    return sum(c.score for c in comparisons) / len(comparisons)


@dataclass(frozen=True)
class EvaluationReport:
    metadata_accuracy: float
    workflow_field_accuracy: float
    variables_accuracy: float
    ged: GedResult
    syntax_err_count: int | None = None
    comparisons: tuple[FieldComparison, ...] = ()
    modes: dict[str, Any] = field(default_factory=dict)
    usage: dict[str, Any] | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "metadata_accuracy": self.metadata_accuracy,
            "workflow_field_accuracy": self.workflow_field_accuracy,
            "variables_accuracy": self.variables_accuracy,
            "ged": self.ged.to_dict(),
            "syntax_err_count": self.syntax_err_count,
            "modes": dict(self.modes),
            "usage": self.usage,
            "fields": [c.to_dict() for c in self.comparisons],
        }


def _category_accuracy(comparisons: list[FieldComparison]) -> float:
    # A category with no reference fields has nothing to miss.
    return field_accuracy(comparisons) if comparisons else 1.0


def metadata_comparisons(gen: PlaybookDocument, ref: PlaybookDocument) -> list[FieldComparison]:
    out = []
    for key in ("name", "description"):
        if getattr(ref, key):
            out.append(FieldComparison(f"/{key}", "string", getattr(ref, key), getattr(gen, key)))
    for key in ("playbook_types", "playbook_activities"):
        if getattr(ref, key):
            out.append(
                FieldComparison(
                    f"/{key}",
                    "vocabulary",
                    frozenset(getattr(ref, key)),
                    frozenset(getattr(gen, key) or ()),
                )
            )
    return out


def workflow_comparisons(
    gen: PlaybookDocument, ref: PlaybookDocument, step_map: dict[str, str | None]
) -> list[FieldComparison]:
    """Per-step string fields; ``step_map`` maps reference step ids to generated ones."""
    out = []
    for ref_key, ref_step in ref.workflow.items():
        gen_key = step_map.get(ref_key)
        gen_step = gen.workflow.get(gen_key) if gen_key else None
        for attr in ("name", "description", "condition"):
            truth = getattr(ref_step, attr)
            if truth:
                value = getattr(gen_step, attr) if gen_step is not None else None
                out.append(FieldComparison(f"/workflow/{ref_key}/{attr}", "string", truth, value))
    return out


def variable_comparisons(gen: PlaybookDocument, ref: PlaybookDocument) -> list[FieldComparison]:
    """Playbook-level variables, matched by name."""
    out = []
    for name, ref_var in ref.playbook_variables.items():
        gen_var = gen.playbook_variables.get(name)
        out.append(
            FieldComparison(
                f"/playbook_variables/{name}/type",
                "vocabulary",
                frozenset({ref_var.var_type}),
                frozenset({gen_var.var_type}) if gen_var else frozenset(),
            )
        )
        if ref_var.description:
            out.append(
                FieldComparison(
                    f"/playbook_variables/{name}/description",
                    "string",
                    ref_var.description,
                    gen_var.description if gen_var else None,
                )
            )
    return out


def evaluate_pair(
    generated: PlaybookDocument,
    reference: PlaybookDocument,
    edge_mode: str = "all",
    exact_threshold: int | None = None,
    timeout: float | None = None,
) -> EvaluationReport:
    """Score ``generated`` against ``reference``.

    Fields enter a category only when the reference carries a non-empty value.
    Steps are paired through the optimal GED node mapping, so a reference step
    the mapping deletes scores 0 on each of its fields.
    """
    kwargs = {}
    if exact_threshold is not None:
        kwargs["exact_threshold"] = exact_threshold
    if timeout is not None:
        kwargs["timeout"] = timeout
    ged = graph_edit_distance(
        build_workflow_graph(reference, edge_mode),
        build_workflow_graph(generated, edge_mode),
        **kwargs,
    )
    step_map = dict(ged.mapping)
    meta = metadata_comparisons(generated, reference)
    flow = workflow_comparisons(generated, reference, step_map)
    variables = variable_comparisons(generated, reference)
    return EvaluationReport(
        metadata_accuracy=_category_accuracy(meta),
        workflow_field_accuracy=_category_accuracy(flow),
        variables_accuracy=_category_accuracy(variables),
        ged=ged,
        comparisons=tuple(meta + flow + variables),
    )
