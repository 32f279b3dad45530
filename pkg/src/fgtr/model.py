"""Relational data model: databases, tables, columns, cells, sub-tables.

Databases are immutable after load. Rows are identified positionally
(0-based load order). Identifier comparison is case-insensitive while the
original casing is preserved for display and serialization.
"""

from __future__ import annotations

import csv
import json
import sqlite3
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

CellValue = Union[None, str, int, float, bool]


class DeclaredType(Enum):
    TEXT = "text"
    INTEGER = "integer"
    REAL = "real"
    BOOLEAN = "boolean"
    DATE = "date"
    OTHER = "other"


class ModelError(Exception):
    """Raised for malformed databases or invalid projections."""


def cell_key(value: CellValue):
    """Hashable, type-aware identity for a cell value.

    Numbers compare numerically across int/float, booleans are distinct
    from numbers, and text never equals a number with the same digits.
    """
    if value is None:
        return ("null",)
    if isinstance(value, bool):
        return ("bool", value)
    if isinstance(value, (int, float)):
        return ("num", float(value))
    return ("text", value)


def canonical_str(value: CellValue) -> Optional[str]:
    """Canonical text form of a cell, used when comparing across inferred types."""
    if value is None:
        return None
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        f = float(value)
        if f.is_integer():
            return str(int(f))
        return repr(f)
    return value


@dataclass(frozen=True)
class QualifiedColumn:
    """A column reference in ``table.column`` form."""

    table_name: str
    column_name: str

    def __post_init__(self):
        if not self.table_name or not self.column_name:
            raise ModelError("qualified column requires non-empty table and column names")

    @property
    def key(self) -> tuple[str, str]:
        return (self.table_name.lower(), self.column_name.lower())

    def __eq__(self, other):
        if not isinstance(other, QualifiedColumn):
            return NotImplemented
        return self.key == other.key

    def __hash__(self):
        return hash(self.key)

    def __str__(self) -> str:
        return f"{self.table_name}.{self.column_name}"

    def __lt__(self, other: "QualifiedColumn") -> bool:
        return self.key < other.key

    @classmethod
    def parse(cls, text: str) -> "QualifiedColumn":
        parts = text.split(".")
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise ModelError(f"malformed column reference: {text!r}")
        return cls(parts[0].strip(), parts[1].strip())


@dataclass
class Column:
    name: str
    declared_type: DeclaredType
    values: list[CellValue]

    @property
    def row_count(self) -> int:
        return len(self.values)


@dataclass
class Table:
    name: str
    columns: list[Column]
    primary_key: list[str] = field(default_factory=list)
    declared_foreign_keys: list[tuple[str, QualifiedColumn]] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for col in self.columns:
            low = col.name.lower()
            if low in seen:
                raise ModelError(f"duplicate column {col.name!r} in table {self.name!r}")
            seen.add(low)
        counts = {col.row_count for col in self.columns}
        if len(counts) > 1:
            raise ModelError(f"ragged columns in table {self.name!r}: row counts {sorted(counts)}")
        for pk in self.primary_key:
            if self.find_column(pk) is None:
                raise ModelError(f"primary key column {pk!r} missing from table {self.name!r}")

    @property
    def row_count(self) -> int:
        return self.columns[0].row_count if self.columns else 0

    def find_column(self, name: str) -> Optional[Column]:
        low = name.lower()
        for col in self.columns:
            if col.name.lower() == low:
                return col
        return None

    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]

    def row(self, index: int) -> tuple[CellValue, ...]:
        return tuple(col.values[index] for col in self.columns)


@dataclass
class Database:
    name: str
    tables: list[Table]

    def __post_init__(self):
        seen = set()
        for t in self.tables:
            low = t.name.lower()
            if low in seen:
                raise ModelError(f"duplicate table name {t.name!r}")
            seen.add(low)

    def find_table(self, name: str) -> Optional[Table]:
        low = name.lower()
        for t in self.tables:
            if t.name.lower() == low:
                return t
        return None

    def has_column(self, ref: QualifiedColumn) -> bool:
        t = self.find_table(ref.table_name)
        return t is not None and t.find_column(ref.column_name) is not None

    def all_columns(self) -> list[QualifiedColumn]:
        return [
            QualifiedColumn(t.name, c.name) for t in self.tables for c in t.columns
        ]


@dataclass
class SubTable:
    """Projection of a source table onto a column subset and a row subset."""

    source_table: str
    columns: list[QualifiedColumn]
    row_indices: list[int]
    rows: list[tuple[CellValue, ...]]

    def to_json_dict(self) -> dict:
        return {
            "table": self.source_table,
            "columns": [str(c) for c in self.columns],
            "rows": [list(r) for r in self.rows],
        }


def project(table: Table, columns: Iterable[QualifiedColumn], rows: Iterable[int]) -> SubTable:
    """Build the sub-table of ``table`` restricted to ``columns`` and ``rows``.

    Rows are emitted in ascending row-index order regardless of input order.
    """
    cols = list(columns)
    resolved = []
    for ref in cols:
        if ref.table_name.lower() != table.name.lower():
            raise ModelError(f"column {ref} does not belong to table {table.name!r}")
        col = table.find_column(ref.column_name)
        if col is None:
            raise ModelError(f"unknown column {ref}")
        resolved.append(col)
    indices = sorted(set(rows))
    if indices and (indices[0] < 0 or indices[-1] >= table.row_count):
        raise ModelError(
            f"row index out of range for table {table.name!r} ({table.row_count} rows)"
        )
    materialized = [tuple(col.values[i] for col in resolved) for i in indices]
    return SubTable(
        source_table=table.name,
        columns=cols,
        row_indices=indices,
        rows=materialized,
    )


# --- loading ---------------------------------------------------------------

_SQLITE_TYPE_MAP = [
    ("INT", DeclaredType.INTEGER),
    ("CHAR", DeclaredType.TEXT),
    ("CLOB", DeclaredType.TEXT),
    ("TEXT", DeclaredType.TEXT),
    ("REAL", DeclaredType.REAL),
    ("FLOA", DeclaredType.REAL),
    ("DOUB", DeclaredType.REAL),
    ("NUMERIC", DeclaredType.REAL),
    ("DECIMAL", DeclaredType.REAL),
    ("BOOL", DeclaredType.BOOLEAN),
    ("DATE", DeclaredType.DATE),
    ("TIME", DeclaredType.DATE),
]


def _sqlite_declared_type(decl: str) -> DeclaredType:
    upper = (decl or "").upper()
    for token, kind in _SQLITE_TYPE_MAP:
        if token in upper:
            return kind
    return DeclaredType.OTHER if upper else DeclaredType.OTHER


def load_database(path: str | Path, fmt: str = None, name: str = None) -> Database:
    """Load a database from a SQLite file or a directory of CSV files.

    ``fmt`` is ``"sqlite"`` or ``"csv_dir"``; when omitted it is inferred
    from the path (directory -> csv_dir, file -> sqlite).
    """
    path = Path(path)
    if not path.exists():
        raise ModelError(f"database path does not exist: {path}")
    if fmt is None:
        fmt = "csv_dir" if path.is_dir() else "sqlite"
    if fmt == "sqlite":
        return _load_sqlite(path, name or path.stem)
    if fmt == "csv_dir":
        return _load_csv_dir(path, name or path.name)
    raise ModelError(f"unknown database format: {fmt!r}")


def _load_sqlite(path: Path, name: str) -> Database:
    conn = sqlite3.connect(f"file:{path}?mode=ro", uri=True)
    conn.text_factory = lambda b: b.decode("utf-8", errors="replace")
    try:
        cur = conn.execute(
            "SELECT name FROM sqlite_master WHERE type='table' "
            "AND name NOT LIKE 'sqlite_%' ORDER BY name"
        )
        table_names = [r[0] for r in cur.fetchall()]
        tables = []
        for tname in table_names:
            info = conn.execute(f'PRAGMA table_info("{tname}")').fetchall()
            col_names = [r[1] for r in info]
            declared = [_sqlite_declared_type(r[2]) for r in info]
            pk = [r[1] for r in sorted((r for r in info if r[5]), key=lambda r: r[5])]
            fks = []
            for fk in conn.execute(f'PRAGMA foreign_key_list("{tname}")').fetchall():
                # (id, seq, ref_table, from_col, to_col, ...); to_col may be
                # NULL when the FK targets the referenced table's primary key.
                ref_table, from_col, to_col = fk[2], fk[3], fk[4]
                if to_col is None:
                    ref_info = conn.execute(f'PRAGMA table_info("{ref_table}")').fetchall()
                    ref_pk = [r[1] for r in ref_info if r[5]]
                    if len(ref_pk) != 1:
                        continue
                    to_col = ref_pk[0]
                fks.append((from_col, QualifiedColumn(ref_table, to_col)))
            rows = conn.execute(f'SELECT * FROM "{tname}"').fetchall()
            columns = []
            for idx, cname in enumerate(col_names):
                values = [_from_sqlite(row[idx]) for row in rows]
                columns.append(Column(cname, declared[idx], values))
            if not columns:
                raise ModelError(f"table {tname!r} has no columns")
            tables.append(Table(tname, columns, primary_key=pk, declared_foreign_keys=fks))
        return Database(name, tables)
    finally:
        conn.close()


def _from_sqlite(v) -> CellValue:
    if isinstance(v, bytes):
        return v.decode("utf-8", errors="replace")
    return v


def _load_csv_dir(path: Path, name: str) -> Database:
    tables = []
    for csv_path in sorted(path.glob("*.csv")):
        tables.append(_load_csv_table(csv_path))
    return Database(name, tables)


def _load_csv_table(csv_path: Path) -> Table:
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ModelError(f"CSV file {csv_path} is empty (missing header)")
        raw_rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ModelError(
                    f"ragged CSV row in {csv_path} line {lineno}: "
                    f"expected {len(header)} fields, got {len(row)}"
                )
            raw_rows.append(row)
    columns = []
    for idx, cname in enumerate(header):
        raw = [r[idx] for r in raw_rows]
        values, declared = _infer_csv_column(raw)
        columns.append(Column(cname, declared, values))
    return Table(csv_path.stem, columns)


def _parse_number(text: str) -> Optional[float]:
    try:
        return float(text)
    except ValueError:
        return None


def _infer_csv_column(raw: list[str]) -> tuple[list[CellValue], DeclaredType]:
    """A column is numeric iff every non-null cell parses as a number."""
    non_null = [v for v in raw if v != ""]
    numeric = bool(non_null) and all(_parse_number(v) is not None for v in non_null)
    values: list[CellValue] = []
    if numeric:
        integral = all(float(v).is_integer() for v in non_null)
        for v in raw:
            if v == "":
                values.append(None)
            else:
                f = float(v)
                values.append(int(f) if integral else f)
        return values, (DeclaredType.INTEGER if integral else DeclaredType.REAL)
    for v in raw:
        values.append(None if v == "" else v)
    return values, DeclaredType.TEXT


def save_csv_dir(db: Database, path: str | Path) -> None:
    """Write every table as ``<table>.csv`` with a header row, nulls as empty fields."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for table in db.tables:
        with open(path / f"{table.name}.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(table.column_names())
            for i in range(table.row_count):
                writer.writerow(["" if v is None else v for v in table.row(i)])


def subtable_to_json(sub: SubTable) -> str:
    return json.dumps(sub.to_json_dict(), ensure_ascii=False)
