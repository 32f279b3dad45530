"""Benchmark construction from Text-to-SQL style inputs.

For each (question, gold SQL) pair: parse the SQL, collect every
referenced column, rewrite the SELECT list to that full column set,
execute the rewrite to materialize the ground-truth sub-table, and keep
the original query's result as the gold answer. Samples whose SQL falls
outside the supported grammar are skipped with a recorded reason.
"""

from __future__ import annotations

import copy
import json
import logging
import sqlite3
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .metrics import row_key
from .model import CellValue, Database, QualifiedColumn, cell_key, load_database
from .sqlmini import SqlError, extract_columns, rewrite_select

logger = logging.getLogger(__name__)


class BenchError(Exception):
    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


@dataclass
class BenchSample:
    question_id: str
    question: str
    db_id: str
    gold_sql: str
    gold_columns: set[QualifiedColumn]
    gold_subtable_columns: list[QualifiedColumn]
    gold_subtable_rows: list[tuple[CellValue, ...]]
    gold_cells: set[tuple[str, str, str]]
    gold_answer: list

    def to_json_dict(self) -> dict:
        return {
            "qid": self.question_id,
            "question": self.question,
            "db_id": self.db_id,
            "gold_sql": self.gold_sql,
            "gold_columns": sorted(str(c) for c in self.gold_columns),
            "gold_subtable": {
                "columns": [str(c) for c in self.gold_subtable_columns],
                "rows": [list(r) for r in self.gold_subtable_rows],
            },
            "gold_cells": sorted(list(t) for t in self.gold_cells),
            "gold_answer": self.gold_answer,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "BenchSample":
        return cls(
            question_id=data["qid"],
            question=data["question"],
            db_id=data["db_id"],
            gold_sql=data["gold_sql"],
            gold_columns={QualifiedColumn.parse(c) for c in data["gold_columns"]},
            gold_subtable_columns=[
                QualifiedColumn.parse(c) for c in data["gold_subtable"]["columns"]
            ],
            gold_subtable_rows=[tuple(r) for r in data["gold_subtable"]["rows"]],
            gold_cells={tuple(t) for t in data["gold_cells"]},
            gold_answer=data["gold_answer"],
        )


@dataclass
class SynonymMap:
    mapping: dict[str, str]

    def __post_init__(self):
        for k, v in self.mapping.items():
            if k == v:
                raise BenchError("identity_synonym", f"synonym {k!r} maps to itself")

    @classmethod
    def from_file(cls, path: str | Path) -> "SynonymMap":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))


def database_to_sqlite(db: Database) -> sqlite3.Connection:
    """Materialize a loaded database into an in-memory SQLite engine."""
    conn = sqlite3.connect(":memory:")
    for table in db.tables:
        cols = ", ".join(f'"{c.name}"' for c in table.columns)
        conn.execute(f'CREATE TABLE "{table.name}" ({cols})')
        placeholders = ", ".join("?" for _ in table.columns)
        conn.executemany(
            f'INSERT INTO "{table.name}" VALUES ({placeholders})',
            (table.row(i) for i in range(table.row_count)),
        )
    conn.commit()
    return conn


def _execute(conn: sqlite3.Connection, sql: str) -> list[tuple]:
    try:
        return [tuple(r) for r in conn.execute(sql).fetchall()]
    except sqlite3.Error as exc:
        raise BenchError("execution_failed", f"{exc} while executing: {sql}") from exc


def gold_cells_for_rows(
    columns: Sequence[QualifiedColumn], rows: Sequence[tuple]
) -> set[tuple[str, str, str]]:
    """Split joined result rows back onto their source tables.

    Row keys hash the value tuple over each table's gold columns in sorted
    order, matching how retrieved sub-tables are keyed at evaluation time.
    """
    by_table: dict[str, list[int]] = {}
    for i, ref in enumerate(columns):
        by_table.setdefault(ref.table_name.lower(), []).append(i)
    for tname in by_table:
        by_table[tname].sort(key=lambda i: columns[i])
    cells = set()
    for row in rows:
        for tname, positions in by_table.items():
            key = row_key([row[i] for i in positions])
            for i in positions:
                cells.add((tname, key, columns[i].column_name.lower()))
    return cells


def materialize_gold(
    question_id: str,
    question: str,
    db_id: str,
    gold_sql: str,
    db: Database,
    conn: sqlite3.Connection,
) -> BenchSample:
    columns = extract_columns(gold_sql, db)
    if not columns:
        raise BenchError("no_columns", "gold SQL references no columns")
    rewritten = rewrite_select(gold_sql, columns, db)
    ordered = sorted(columns)
    raw_rows = _execute(conn, rewritten)
    seen, rows = set(), []
    for row in raw_rows:
        k = tuple(cell_key(v) for v in row)
        if k not in seen:
            seen.add(k)
            rows.append(row)
    answer_rows = _execute(conn, gold_sql)
    return BenchSample(
        question_id=question_id,
        question=question,
        db_id=db_id,
        gold_sql=gold_sql,
        gold_columns=columns,
        gold_subtable_columns=ordered,
        gold_subtable_rows=rows,
        gold_cells=gold_cells_for_rows(ordered, rows),
        gold_answer=[list(r) for r in answer_rows],
    )


# --- augmentation -----------------------------------------------------------


def augment(
    db: Database,
    samples: Sequence[BenchSample],
    synonyms: SynonymMap,
    seed: int = 0,
) -> tuple[Database, list[BenchSample], list[dict]]:
    """Replace gold-relevant cell values with synonyms and re-materialize.

    Replacement is column-global: every occurrence of a mapped value inside
    a targeted column changes. A replacement that collides with an existing
    distinct value in the same column is skipped (it would merge value
    groups and make the gold ambiguous). Question text is left unchanged.
    """
    augmented = copy.deepcopy(db)
    skipped: list[dict] = []
    applied: dict[str, str] = {}
    target_columns: set[QualifiedColumn] = set()
    for sample in samples:
        target_columns |= sample.gold_columns
    for ref in sorted(target_columns):
        table = augmented.find_table(ref.table_name)
        if table is None:
            continue
        col = table.find_column(ref.column_name)
        if col is None:
            continue
        existing = {v for v in col.values if isinstance(v, str)}
        for key, replacement in synonyms.mapping.items():
            if key not in existing:
                continue
            if replacement in existing:
                skipped.append(
                    {
                        "column": str(ref),
                        "value": key,
                        "replacement": replacement,
                        "reason": "collision_with_existing_value",
                    }
                )
                continue
            col.values = [replacement if v == key else v for v in col.values]
            existing.discard(key)
            existing.add(replacement)
            applied[key] = replacement

    conn = database_to_sqlite(augmented)
    updated = []
    try:
        for sample in samples:
            # string literals naming a replaced value must follow the data,
            # or the gold rows vanish from the re-materialized sub-table
            gold_sql = sample.gold_sql
            for key, replacement in applied.items():
                gold_sql = gold_sql.replace(
                    "'" + key.replace("'", "''") + "'",
                    "'" + replacement.replace("'", "''") + "'",
                )
            updated.append(
                materialize_gold(
                    sample.question_id,
                    sample.question,
                    sample.db_id,
                    gold_sql,
                    augmented,
                    conn,
                )
            )
    finally:
        conn.close()
    return augmented, updated, skipped


# --- dataset driver ---------------------------------------------------------


def build_benchmark(
    dataset: Sequence[dict],
    db_root: str | Path,
    synonyms: Optional[SynonymMap] = None,
    seed: int = 0,
):
    """Process Spider/BIRD-style records ({question, db_id, query}).

    Databases are looked up under ``db_root`` as ``<db_id>/<db_id>.sqlite``,
    ``<db_id>.sqlite`` or a ``<db_id>/`` CSV directory. Returns
    (samples, skips) where skips records per-sample failure reasons.
    """
    db_root = Path(db_root)
    samples: list[BenchSample] = []
    skips: list[dict] = []
    by_db: dict[str, list[tuple[int, dict]]] = {}
    for i, record in enumerate(dataset):
        by_db.setdefault(record["db_id"], []).append((i, record))

    for db_id in sorted(by_db):
        db_path = _find_db_path(db_root, db_id)
        if db_path is None:
            for i, record in by_db[db_id]:
                skips.append({"qid": _qid(record, i), "reason": "db_not_found", "db_id": db_id})
            continue
        db = load_database(db_path, name=db_id)
        conn = database_to_sqlite(db)
        try:
            db_samples = []
            for i, record in by_db[db_id]:
                qid = _qid(record, i)
                try:
                    db_samples.append(
                        materialize_gold(
                            qid, record["question"], db_id, record["query"], db, conn
                        )
                    )
                except (SqlError, BenchError) as exc:
                    skips.append({"qid": qid, "reason": exc.code, "detail": str(exc)})
            if synonyms is not None and db_samples:
                _, db_samples, aug_skips = augment(db, db_samples, synonyms, seed=seed)
                skips.extend(
                    {"qid": "-", "reason": "augment_skip", **s} for s in aug_skips
                )
            samples.extend(db_samples)
        finally:
            conn.close()
    samples.sort(key=lambda s: s.question_id)
    return samples, skips


def _qid(record: dict, index: int) -> str:
    return str(record.get("qid", record.get("question_id", index)))


def _find_db_path(db_root: Path, db_id: str) -> Optional[Path]:
    for candidate in (
        db_root / db_id / f"{db_id}.sqlite",
        db_root / f"{db_id}.sqlite",
        db_root / db_id / f"{db_id}.db",
    ):
        if candidate.exists():
            return candidate
    if (db_root / db_id).is_dir() and list((db_root / db_id).glob("*.csv")):
        return db_root / db_id
    return None
