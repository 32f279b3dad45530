"""Retrieval scoring: precision, recall, F2, and strict recall at the
schema and cell levels, with macro-averaged reports over questions.

Cell identity is value-based: a row is keyed by the hash of its value
tuple over the question's gold columns, since positional indices are not
comparable between gold-SQL execution order and source-table order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .model import CellValue, QualifiedColumn, SubTable, canonical_str

MISSING = "\x00missing"


class EvalError(Exception):
    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


@dataclass
class MetricSet:
    precision: float
    recall: float
    f2: float
    strict_recall: int

    def to_json_dict(self) -> dict:
        return {
            "P": round(self.precision, 4),
            "R": round(self.recall, 4),
            "F2": round(self.f2, 4),
            "SR": self.strict_recall,
        }


@dataclass
class GoldStandard:
    question_id: str
    gold_columns: set[QualifiedColumn]
    gold_cells: set[tuple[str, str, str]] = field(default_factory=set)
    gold_answer: Optional[list] = None


@dataclass
class QuestionScore:
    question_id: str
    schema: MetricSet
    cell: Optional[MetricSet] = None
    skipped_cell_reason: Optional[str] = None


@dataclass
class ScoreReport:
    per_question: list[QuestionScore]
    aggregate: dict

    def to_json_dict(self) -> dict:
        return {
            "questions": [
                {
                    "qid": q.question_id,
                    "schema": q.schema.to_json_dict(),
                    "cell": q.cell.to_json_dict() if q.cell else None,
                    **(
                        {"skipped_cell_reason": q.skipped_cell_reason}
                        if q.skipped_cell_reason
                        else {}
                    ),
                }
                for q in self.per_question
            ],
            "aggregate": self.aggregate,
        }

    def to_csv_rows(self) -> list[list]:
        rows = [["qid", "level", "P", "R", "F2", "SR"]]
        for q in self.per_question:
            s = q.schema
            rows.append([q.question_id, "schema", s.precision, s.recall, s.f2, s.strict_recall])
            if q.cell:
                c = q.cell
                rows.append([q.question_id, "cell", c.precision, c.recall, c.f2, c.strict_recall])
        return rows


def f_beta2(precision: float, recall: float) -> float:
    """F2 with precision/recall on the 0-100 scale."""
    denom = 4 * precision + recall
    if denom == 0:
        return 0.0
    return 5 * precision * recall / denom


def _set_metrics(retrieved: set, gold: set) -> MetricSet:
    hit = len(retrieved & gold)
    precision = 100.0 * hit / len(retrieved) if retrieved else 0.0
    recall = 100.0 * hit / len(gold)
    return MetricSet(
        precision=precision,
        recall=recall,
        f2=f_beta2(precision, recall),
        strict_recall=1 if gold <= retrieved else 0,
    )


def score_schema(
    retrieved: Iterable[QualifiedColumn], gold: Iterable[QualifiedColumn]
) -> MetricSet:
    gold_set = set(gold)
    if not gold_set:
        raise EvalError("empty_gold", "gold column set must be non-empty")
    return _set_metrics(set(retrieved), gold_set)


# --- cell level -------------------------------------------------------------


def row_key(values: Sequence[CellValue]) -> str:
    """Stable hash of a row's value tuple (canonical string forms)."""
    payload = json.dumps(
        [None if v is None else canonical_str(v) for v in values], ensure_ascii=False
    )
    return hashlib.sha1(payload.encode("utf-8")).hexdigest()[:16]


def cells_from_subtables(
    sub_tables: Sequence[SubTable], gold_columns: Iterable[QualifiedColumn]
) -> set[tuple[str, str, str]]:
    """Triples (table, row key, column) for every cell of the given sub-tables.

    Row keys are computed over the table's gold columns so that retrieved
    rows can be matched against gold rows by value; retrieved columns
    missing a gold column get a sentinel, which can never match.
    """
    gold_by_table: dict[str, list[QualifiedColumn]] = {}
    for ref in gold_columns:
        gold_by_table.setdefault(ref.table_name.lower(), []).append(ref)
    triples = set()
    for sub in sub_tables:
        tname = sub.source_table.lower()
        key_cols = sorted(gold_by_table.get(tname, []))
        col_pos = {c.column_name.lower(): i for i, c in enumerate(sub.columns)}
        for row in sub.rows:
            key_values = [
                row[col_pos[kc.column_name.lower()]]
                if kc.column_name.lower() in col_pos
                else MISSING
                for kc in key_cols
            ]
            key = row_key(key_values)
            for col in sub.columns:
                triples.add((tname, key, col.column_name.lower()))
    return triples


def score_cells(
    sub_tables: Sequence[SubTable],
    gold_cells: Iterable[tuple[str, str, str]],
    gold_columns: Iterable[QualifiedColumn],
) -> MetricSet:
    gold_set = {(t.lower(), k, c.lower()) for t, k, c in gold_cells}
    if not gold_set:
        raise EvalError("empty_gold", "gold cell set must be non-empty")
    retrieved = cells_from_subtables(sub_tables, gold_columns)
    return _set_metrics(retrieved, gold_set)


# --- aggregation ------------------------------------------------------------


def aggregate(scores: Sequence[QuestionScore]) -> ScoreReport:
    """Unweighted macro average over questions; SR reported as a percentage."""
    if not scores:
        raise EvalError("no_scores", "at least one question score is required")

    def mean(values):
        return sum(values) / len(values)

    def level(metric_sets):
        return {
            "P": round(mean([m.precision for m in metric_sets]), 4),
            "R": round(mean([m.recall for m in metric_sets]), 4),
            "F2": round(mean([m.f2 for m in metric_sets]), 4),
            "SR": round(100.0 * mean([m.strict_recall for m in metric_sets]), 4),
        }

    agg = {"schema": level([q.schema for q in scores]), "questions": len(scores)}
    cell_sets = [q.cell for q in scores if q.cell is not None]
    if cell_sets:
        agg["cell"] = level(cell_sets)
        agg["cell_scored"] = len(cell_sets)
    return ScoreReport(per_question=list(scores), aggregate=agg)
