"""Online stage 2: range parsing, adaptive cell mapping, and cell merging.

Selected columns are classified as constrained (carrying an explicit value
condition from the question) or dependent (full range). Text constraints
map to cells through ANN search over the prebuilt unique-value index;
numeric constraints filter the value->rows map exactly. Matched row sets
are merged per table by union (Eq.-style semantics; intersection is
available behind ``merge_mode``) and projected into sub-tables.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .llm import (
    ChatProvider,
    ChatRequest,
    EmbeddingProvider,
    GatewayError,
    complete_with_reprompt,
    extract_first_json,
    render_prompt,
)
from .model import CellValue, Database, QualifiedColumn, SubTable, project
from .preprocess import CellIndex, SemanticSchema
from .schema_retrieval import SchemaSelection, retrieve_schema

logger = logging.getLogger(__name__)

DEFAULT_SIGMA = 0.85
DEFAULT_ROW_CAP = 10_000
K_MIN = 3

_OPS = {"eq", "ne", "lt", "le", "gt", "ge", "between", "in_set"}
_OP_ALIASES = {
    "=": "eq",
    "==": "eq",
    "!=": "ne",
    "<>": "ne",
    "<": "lt",
    "<=": "le",
    ">": "gt",
    ">=": "ge",
    "in": "in_set",
}


class RangeError(Exception):
    pass


@dataclass(frozen=True)
class NumericPredicate:
    op: str
    values: tuple[float, ...]

    def __post_init__(self):
        if self.op not in _OPS:
            raise RangeError(f"unknown predicate operator {self.op!r}")
        if self.op == "between":
            if len(self.values) != 2 or self.values[0] > self.values[1]:
                raise RangeError("between requires lo <= hi")
        elif self.op == "in_set":
            if not self.values:
                raise RangeError("in_set requires at least one literal")
        elif len(self.values) != 1:
            raise RangeError(f"operator {self.op} takes exactly one literal")

    def evaluate(self, x: float) -> bool:
        if self.op == "eq":
            return x == self.values[0]
        if self.op == "ne":
            return x != self.values[0]
        if self.op == "lt":
            return x < self.values[0]
        if self.op == "le":
            return x <= self.values[0]
        if self.op == "gt":
            return x > self.values[0]
        if self.op == "ge":
            return x >= self.values[0]
        if self.op == "between":
            return self.values[0] <= x <= self.values[1]
        return x in self.values


def parse_predicate(spec) -> NumericPredicate:
    """Parse a predicate from the small textual grammar or a JSON object.

    Text form: ``<op> <literal> [<literal> ...]`` with op one of
    eq/ne/lt/le/gt/ge/between/in_set or a comparison symbol.
    """
    if isinstance(spec, dict):
        op = _OP_ALIASES.get(str(spec.get("op", "")).lower(), str(spec.get("op", "")).lower())
        if op == "between":
            return NumericPredicate(op, (float(spec["lo"]), float(spec["hi"])))
        if op == "in_set":
            return NumericPredicate(op, tuple(float(v) for v in spec["values"]))
        return NumericPredicate(op, (float(spec["value"]),))
    parts = str(spec).replace(",", " ").split()
    if not parts:
        raise RangeError("empty predicate")
    op = _OP_ALIASES.get(parts[0].lower(), parts[0].lower())
    try:
        literals = tuple(float(p) for p in parts[1:])
    except ValueError as exc:
        raise RangeError(f"non-numeric literal in predicate {spec!r}") from exc
    if not literals:
        raise RangeError(f"predicate {spec!r} has no literals")
    return NumericPredicate(op, literals)


@dataclass
class ColumnConstraint:
    column: QualifiedColumn
    kind: str  # constrained_text | constrained_numeric | dependent
    keywords: list[str] = field(default_factory=list)
    predicate: Optional[NumericPredicate] = None

    def __post_init__(self):
        if self.kind == "constrained_text" and not self.keywords:
            raise RangeError("constrained_text requires at least one keyword")
        if self.kind == "constrained_numeric" and self.predicate is None:
            raise RangeError("constrained_numeric requires a predicate")


@dataclass
class CellMatchSet:
    column: QualifiedColumn
    matched_values: list[tuple[CellValue, Optional[float]]]
    row_indices: set[int]
    diagnostics: dict = field(default_factory=dict)


@dataclass
class RetrievalResult:
    question: str
    selection: Optional[SchemaSelection]
    sub_tables: list[SubTable]
    diagnostics: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "question": self.question,
            "schema_selection": self.selection.to_json_dict() if self.selection else {},
            "sub_tables": [s.to_json_dict() for s in self.sub_tables],
            "diagnostics": self.diagnostics,
        }


# --- range parsing ----------------------------------------------------------


def _parse_range_response(raw: str) -> dict:
    obj = extract_first_json(raw)
    if "columns" not in obj or not isinstance(obj["columns"], dict):
        from .llm import ParseError

        raise ParseError("missing_key", "range parsing response missing 'columns' map")
    return obj


def parse_ranges(
    question: str,
    selection: SchemaSelection,
    schema: SemanticSchema,
    chat: ChatProvider,
    prompt_dir: Path = None,
    temperature: float = 0.0,
) -> list[ColumnConstraint]:
    """One LLM call classifying every filled column; falls back to
    all-dependent (full-range retrieval) when the response is unusable."""
    columns = sorted(selection.filled)
    if not columns:
        return []
    listing = "\n".join(f"- {c}: {schema.describe(c)}" for c in columns)
    prompt = render_prompt(
        "range_parsing",
        {"QUESTION": question, "COLUMNS": listing},
        prompt_dir,
    )
    parsed = None
    try:
        parsed = complete_with_reprompt(
            chat, ChatRequest(prompt=prompt, temperature=temperature), _parse_range_response
        )
    except GatewayError as exc:
        logger.warning("range parsing failed: %s", exc)
    if parsed is None:
        logger.warning("range parsing degraded: all columns treated as dependent")
        return [ColumnConstraint(column=c, kind="dependent") for c in columns]

    classified = {k.lower(): v for k, v in parsed["columns"].items()}
    constraints = []
    for ref in columns:
        entry = classified.get(str(ref).lower())
        constraint = ColumnConstraint(column=ref, kind="dependent")
        if isinstance(entry, dict):
            kind = str(entry.get("kind", "dependent"))
            try:
                if kind == "constrained_text":
                    keywords = [str(k) for k in entry.get("keywords", []) if str(k)]
                    if keywords:
                        constraint = ColumnConstraint(
                            column=ref, kind="constrained_text", keywords=keywords
                        )
                elif kind == "constrained_numeric":
                    constraint = ColumnConstraint(
                        column=ref,
                        kind="constrained_numeric",
                        predicate=parse_predicate(entry.get("predicate")),
                    )
            except RangeError as exc:
                logger.warning("ignoring malformed constraint for %s: %s", ref, exc)
        constraints.append(constraint)
    return constraints


# --- cell mapping -----------------------------------------------------------


def _numeric_cell(value: CellValue) -> Optional[float]:
    if value is None or isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        return float(value)
    try:
        return float(value)
    except ValueError:
        return None


def map_cells(
    constraint: ColumnConstraint,
    index: CellIndex,
    embedder: EmbeddingProvider = None,
    sigma: float = DEFAULT_SIGMA,
) -> CellMatchSet:
    """Resolve one constrained column to its matching cells and rows."""
    if constraint.kind == "dependent":
        raise RangeError("dependent columns have no cell mapping (full range)")
    entry = index.get(constraint.column)
    if entry is None:
        raise RangeError(f"column {constraint.column} missing from cell index")

    if constraint.kind == "constrained_numeric":
        matched, rows = [], set()
        skipped = 0
        for value, value_rows in zip(entry.values, entry.rows):
            x = _numeric_cell(value)
            if x is None:
                skipped += 1
                continue
            if constraint.predicate.evaluate(x):
                matched.append((value, None))
                rows.update(value_rows)
        diag = {"unparseable_cells": skipped} if skipped else {}
        if not rows:
            diag["no_match"] = True
        return CellMatchSet(constraint.column, matched, rows, diag)

    if embedder is None:
        raise RangeError("text constraints require an embedding provider")
    if entry.numeric:
        raise RangeError(f"column {constraint.column} is numeric; text constraint invalid")
    if not entry.values:
        return CellMatchSet(constraint.column, [], set(), {"no_match": True})

    from .preprocess import query_index

    top_n = max(len(constraint.keywords), K_MIN)
    pool_k = max(top_n, 32)
    vectors = embedder.embed(constraint.keywords)
    matched: dict = {}
    for vec in vectors:
        hits = query_index(index, constraint.column, vec, pool_k)
        for rank, (value, sim, value_rows) in enumerate(hits):
            if rank < top_n or sim >= sigma:
                key = id_key = str(value)
                prev = matched.get(id_key)
                if prev is None or sim > prev[1]:
                    matched[id_key] = (value, sim, value_rows)
    values = sorted(matched.values(), key=lambda t: (-t[1], str(t[0])))
    rows = set()
    for _, _, value_rows in values:
        rows.update(value_rows)
    return CellMatchSet(
        constraint.column,
        [(v, s) for v, s, _ in values],
        rows,
        {} if rows else {"no_match": True},
    )


# --- merging ----------------------------------------------------------------


def merge_cells(
    selection: SchemaSelection,
    constraints: Sequence[ColumnConstraint],
    matches: dict[QualifiedColumn, CellMatchSet],
    db: Database,
    row_cap: int = DEFAULT_ROW_CAP,
    merge_mode: str = "union",
) -> RetrievalResult:
    """Combine per-column row sets into one sub-table per touched table."""
    if merge_mode not in ("union", "intersection"):
        raise ValueError(f"unknown merge_mode {merge_mode!r}")
    by_table: dict[str, list[QualifiedColumn]] = {}
    for ref in selection.filled:
        by_table.setdefault(ref.table_name.lower(), []).append(ref)
    constrained_by_table: dict[str, list[QualifiedColumn]] = {}
    for c in constraints:
        if c.kind != "dependent":
            constrained_by_table.setdefault(c.column.table_name.lower(), []).append(c.column)

    sub_tables = []
    diagnostics: dict = {"tables": {}}
    for tname in sorted(by_table):
        table = db.find_table(tname)
        if table is None:
            continue
        cols = sorted(
            by_table[tname],
            key=lambda r: [c.name.lower() for c in table.columns].index(r.column_name.lower()),
        )
        constrained = constrained_by_table.get(tname, [])
        tdiag: dict = {}
        if constrained:
            row_sets = [matches[ref].row_indices for ref in constrained if ref in matches]
            if merge_mode == "union":
                rows = set().union(*row_sets) if row_sets else set()
            else:
                rows = set.intersection(*row_sets) if row_sets else set()
        else:
            rows = set(range(table.row_count))
            if len(rows) > row_cap:
                rows = set(sorted(rows)[:row_cap])
                tdiag["truncated"] = True
        sub = project(table, cols, rows)
        sub_tables.append(sub)
        tdiag["rows"] = len(sub.row_indices)
        tdiag["constrained_columns"] = sorted(str(c) for c in constrained)
        diagnostics["tables"][table.name] = tdiag
    return RetrievalResult(
        question="", selection=selection, sub_tables=sub_tables, diagnostics=diagnostics
    )


# --- full pipeline ----------------------------------------------------------


def retrieve(
    question: str,
    db: Database,
    schema: SemanticSchema,
    joins,
    index: CellIndex,
    chat: ChatProvider,
    embedder: EmbeddingProvider,
    k: int = 5,
    theta: float = 0.6,
    sigma: float = DEFAULT_SIGMA,
    seed: int = 0,
    row_cap: int = DEFAULT_ROW_CAP,
    merge_mode: str = "union",
    prompt_dir: Path = None,
    max_workers: int = 4,
) -> RetrievalResult:
    """Hierarchical retrieval: schema stage, then cell stage."""
    selection = retrieve_schema(
        question, db, schema, joins, chat, k=k, theta=theta, seed=seed, prompt_dir=prompt_dir
    )
    if not selection.filled:
        return RetrievalResult(
            question=question, selection=selection, sub_tables=[], diagnostics={}
        )
    constraints = parse_ranges(question, selection, schema, chat, prompt_dir=prompt_dir)
    active = [c for c in constraints if c.kind != "dependent"]
    matches: dict[QualifiedColumn, CellMatchSet] = {}
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = {
            pool.submit(map_cells, c, index, embedder, sigma): c.column for c in active
        }
        for fut, column in futures.items():
            matches[column] = fut.result()
    result = merge_cells(
        selection, constraints, matches, db, row_cap=row_cap, merge_mode=merge_mode
    )
    result.question = question
    for column, match in matches.items():
        if match.diagnostics:
            result.diagnostics.setdefault("columns", {})[str(column)] = match.diagnostics
    return result
