"""Offline preprocessing: column profiling, schema semantization,
join-path discovery, and the columnar ANN index over unique cell values.

All artifacts are immutable once built and persist to a directory so the
online retrieval stages can run without touching the source database.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .hnsw import HNSWIndex
from .llm import (
    ChatProvider,
    ChatRequest,
    EmbeddingProvider,
    GatewayError,
    complete_with_reprompt,
    extract_first_json,
    render_prompt,
)
from .model import (
    CellValue,
    Column,
    Database,
    DeclaredType,
    QualifiedColumn,
    canonical_str,
    cell_key,
)

logger = logging.getLogger(__name__)

DEFAULT_TAU_JOIN = 0.5
NUMERIC_FRACTION_THRESHOLD = 0.99
DECLARED_FK_WEIGHT = math.inf


class PreprocessError(Exception):
    pass


class IndexBuildError(PreprocessError):
    """Embedding failure during index construction; carries the partial index."""

    def __init__(self, message: str, partial: "CellIndex", failed_column: QualifiedColumn):
        super().__init__(message)
        self.partial = partial
        self.failed_column = failed_column


# --- profiling --------------------------------------------------------------


@dataclass
class ColumnProfile:
    column: QualifiedColumn
    declared_type: DeclaredType
    distinct_count: int
    row_count: int
    uniqueness: float
    top_values: list[tuple[CellValue, int]]
    longest_example: Optional[str] = None
    shortest_example: Optional[str] = None

    def to_json_dict(self) -> dict:
        return {
            "column": str(self.column),
            "declared_type": self.declared_type.value,
            "distinct_count": self.distinct_count,
            "row_count": self.row_count,
            "uniqueness": self.uniqueness,
            "top_values": [[v, n] for v, n in self.top_values],
            "longest_example": self.longest_example,
            "shortest_example": self.shortest_example,
        }


def profile_column(table_name: str, col: Column) -> ColumnProfile:
    counts: dict = {}
    originals: dict = {}
    for v in col.values:
        if v is None:
            continue
        k = cell_key(v)
        counts[k] = counts.get(k, 0) + 1
        originals.setdefault(k, v)
    row_count = col.row_count
    distinct = len(counts)
    uniqueness = distinct / row_count if row_count > 0 else 0.0
    ranked = sorted(
        counts.items(), key=lambda kv: (-kv[1], canonical_str(originals[kv[0]]))
    )
    top = [(originals[k], n) for k, n in ranked[:3]]
    strings = sorted(canonical_str(v) for v in col.values if v is not None)
    longest = max(strings, key=len) if strings else None
    shortest = min(strings, key=len) if strings else None
    return ColumnProfile(
        column=QualifiedColumn(table_name, col.name),
        declared_type=col.declared_type,
        distinct_count=distinct,
        row_count=row_count,
        uniqueness=uniqueness,
        top_values=top,
        longest_example=longest,
        shortest_example=shortest,
    )


def profile_columns(db: Database) -> list[ColumnProfile]:
    return [profile_column(t.name, c) for t in db.tables for c in t.columns]


def is_numeric_column(col: Column) -> bool:
    """Numeric columns use exact matching and are never embedded.

    Text-declared columns count as numeric when >= 99% of their non-null
    values parse as numbers (dirty real-world data tolerance).
    """
    if col.declared_type in (DeclaredType.INTEGER, DeclaredType.REAL):
        return True
    non_null = [v for v in col.values if v is not None]
    if not non_null:
        return False
    numeric = sum(
        1
        for v in non_null
        if isinstance(v, (int, float)) and not isinstance(v, bool)
        or (isinstance(v, str) and _parses_number(v))
    )
    return numeric / len(non_null) >= NUMERIC_FRACTION_THRESHOLD


def _parses_number(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


# --- semantization ----------------------------------------------------------


@dataclass
class SemanticSchema:
    table_descriptions: dict[str, str] = field(default_factory=dict)
    column_descriptions: dict[QualifiedColumn, str] = field(default_factory=dict)

    def describe(self, ref: QualifiedColumn) -> str:
        return self.column_descriptions.get(ref, "")

    def to_json_dict(self) -> dict:
        tables: dict[str, dict] = {}
        for tname, desc in sorted(self.table_descriptions.items()):
            tables[tname] = {"description": desc, "columns": {}}
        for ref, desc in sorted(self.column_descriptions.items(), key=lambda kv: kv[0].key):
            entry = tables.setdefault(ref.table_name, {"description": "", "columns": {}})
            entry["columns"][ref.column_name] = desc
        return {"tables": tables}

    @classmethod
    def from_json_dict(cls, data: dict) -> "SemanticSchema":
        schema = cls()
        for tname, entry in data.get("tables", {}).items():
            schema.table_descriptions[tname] = entry.get("description", "")
            for cname, desc in entry.get("columns", {}).items():
                schema.column_descriptions[QualifiedColumn(tname, cname)] = desc
        return schema


def fallback_description(profile: ColumnProfile) -> str:
    examples = ", ".join(canonical_str(v) for v, _ in profile.top_values)
    return (
        f"column {profile.column.column_name} of type "
        f"{profile.declared_type.value}; examples: {examples}"
    )


def _parse_semantize_response(raw: str) -> dict:
    obj = extract_first_json(raw)
    if "columns" not in obj or not isinstance(obj["columns"], dict):
        from .llm import ParseError

        raise ParseError("missing_key", "semantization response missing 'columns' map")
    return obj


def semantize_schema(
    db: Database,
    profiles: Sequence[ColumnProfile],
    chat: ChatProvider,
    prompt_dir: Path = None,
    temperature: float = 0.0,
) -> SemanticSchema:
    """One LLM call per table; falls back to a metadata-derived description
    for any table whose call fails, never aborting the pipeline."""
    by_table: dict[str, list[ColumnProfile]] = {}
    for p in profiles:
        by_table.setdefault(p.column.table_name.lower(), []).append(p)
    schema = SemanticSchema()
    for table in db.tables:
        t_profiles = by_table.get(table.name.lower(), [])
        meta_lines = []
        for p in t_profiles:
            examples = ", ".join(canonical_str(v) for v, _ in p.top_values)
            meta_lines.append(
                f"- {p.column.column_name} ({p.declared_type.value}): "
                f"top values [{examples}]; longest {p.longest_example!r}; "
                f"shortest {p.shortest_example!r}"
            )
        prompt = render_prompt(
            "semantize",
            {"TABLE": table.name, "COLUMNMETA": "\n".join(meta_lines)},
            prompt_dir,
        )
        parsed = None
        try:
            parsed = complete_with_reprompt(
                chat,
                ChatRequest(prompt=prompt, temperature=temperature),
                _parse_semantize_response,
            )
        except GatewayError as exc:
            logger.warning("semantization failed for table %s: %s", table.name, exc)
        if parsed is None:
            schema.table_descriptions[table.name] = f"table {table.name}"
            for p in t_profiles:
                schema.column_descriptions[p.column] = fallback_description(p)
            continue
        schema.table_descriptions[table.name] = str(parsed.get("table_description", ""))
        described = {k.lower(): str(v) for k, v in parsed["columns"].items()}
        for p in t_profiles:
            desc = described.get(p.column.column_name.lower())
            schema.column_descriptions[p.column] = desc or fallback_description(p)
    return schema


# --- join discovery ---------------------------------------------------------


@dataclass
class JoinCandidate:
    left: QualifiedColumn
    right: QualifiedColumn
    semantic_sim: float
    jaccard: float
    uniqueness_max: float
    weight: float
    declared: bool = False

    def to_json_dict(self) -> dict:
        return {
            "left": str(self.left),
            "right": str(self.right),
            "semantic_sim": self.semantic_sim,
            "jaccard": self.jaccard,
            "uniqueness_max": self.uniqueness_max,
            "weight": "declared" if math.isinf(self.weight) else self.weight,
            "declared": self.declared,
        }


@dataclass
class JoinGraph:
    nodes: list[str]
    edges: list[JoinCandidate]

    def to_json_dict(self) -> dict:
        return {
            "nodes": sorted(self.nodes, key=str.lower),
            "edges": [e.to_json_dict() for e in self.edges],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "JoinGraph":
        edges = []
        for e in data.get("edges", []):
            weight = e["weight"]
            edges.append(
                JoinCandidate(
                    left=QualifiedColumn.parse(e["left"]),
                    right=QualifiedColumn.parse(e["right"]),
                    semantic_sim=e["semantic_sim"],
                    jaccard=e["jaccard"],
                    uniqueness_max=e["uniqueness_max"],
                    weight=math.inf if weight == "declared" else weight,
                    declared=e.get("declared", False),
                )
            )
        return cls(nodes=list(data.get("nodes", [])), edges=edges)


def connection_weight(semantic_sim: float, jaccard: float, uniqueness_max: float) -> float:
    """Join-likelihood score: (semantic similarity + Jaccard) x max uniqueness.

    Negative cosine is clamped to 0 before combining, keeping the weight in
    [0, 2].
    """
    s = max(semantic_sim, 0.0)
    return (s + jaccard) * uniqueness_max


def value_set(col: Column) -> set:
    return {cell_key(v) for v in col.values if v is not None}


def canonical_value_set(col: Column) -> set:
    return {canonical_str(v) for v in col.values if v is not None}


def jaccard_similarity(left: Column, right: Column) -> float:
    """Jaccard over distinct non-null value sets.

    Columns of different inferred types (numeric vs text) are compared via
    their canonical string forms, since FK pairs across SQLite/CSV sources
    often disagree on declared type.
    """
    if is_numeric_column(left) != is_numeric_column(right):
        a, b = canonical_value_set(left), canonical_value_set(right)
    else:
        a, b = value_set(left), value_set(right)
    if not a and not b:
        return 0.0
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def discover_joins(
    db: Database,
    profiles: Sequence[ColumnProfile],
    schema: SemanticSchema,
    embedder: EmbeddingProvider,
    tau_join: float = DEFAULT_TAU_JOIN,
) -> JoinGraph:
    """Score every cross-table column pair and keep, per table pair, the
    max-weight candidate clearing ``tau_join``. Declared foreign keys are
    always included, marked with infinite weight."""
    uniq = {p.column: p.uniqueness for p in profiles}
    refs = db.all_columns()
    texts = [f"{ref}: {schema.describe(ref)}" for ref in refs]
    vectors = embedder.embed(texts) if refs else np.zeros((0, 1))
    vec_of = {ref: vectors[i] for i, ref in enumerate(refs)}

    best: dict[tuple[str, str], JoinCandidate] = {}
    tables = db.tables
    for i in range(len(tables)):
        for j in range(i + 1, len(tables)):
            ti, tj = tables[i], tables[j]
            pair_key = tuple(sorted((ti.name.lower(), tj.name.lower())))
            for ci in ti.columns:
                left = QualifiedColumn(ti.name, ci.name)
                for cj in tj.columns:
                    right = QualifiedColumn(tj.name, cj.name)
                    s = float(np.dot(vec_of[left], vec_of[right]))
                    jac = jaccard_similarity(ci, cj)
                    u_max = max(uniq[left], uniq[right])
                    w = connection_weight(s, jac, u_max)
                    cand = JoinCandidate(left, right, max(s, 0.0), jac, u_max, w)
                    cur = best.get(pair_key)
                    if cur is None or w > cur.weight or (
                        w == cur.weight and (cand.left, cand.right) < (cur.left, cur.right)
                    ):
                        best[pair_key] = cand

    edges = [c for c in best.values() if c.weight >= tau_join]
    accepted_pairs = {
        tuple(sorted((e.left.table_name.lower(), e.right.table_name.lower()))) for e in edges
    }
    for table in db.tables:
        for local, remote in table.declared_foreign_keys:
            left = QualifiedColumn(table.name, local)
            pair_key = tuple(sorted((table.name.lower(), remote.table_name.lower())))
            if pair_key in accepted_pairs:
                edges = [
                    e
                    for e in edges
                    if tuple(sorted((e.left.table_name.lower(), e.right.table_name.lower())))
                    != pair_key
                    or e.declared
                ]
            edges.append(
                JoinCandidate(
                    left=left,
                    right=remote,
                    semantic_sim=0.0,
                    jaccard=0.0,
                    uniqueness_max=0.0,
                    weight=DECLARED_FK_WEIGHT,
                    declared=True,
                )
            )
            accepted_pairs.add(pair_key)

    edges.sort(key=lambda e: (e.left.key, e.right.key))
    return JoinGraph(nodes=[t.name for t in db.tables], edges=edges)


# --- cell index -------------------------------------------------------------


@dataclass
class ColumnCellIndex:
    column: QualifiedColumn
    numeric: bool
    values: list[CellValue]  # unique non-null values, canonical order
    rows: list[list[int]]  # rows[i] lists the row indices holding values[i]
    ann: Optional[HNSWIndex] = None

    def row_map(self) -> dict:
        return {cell_key(v): r for v, r in zip(self.values, self.rows)}


@dataclass
class CellIndex:
    columns: dict[QualifiedColumn, ColumnCellIndex] = field(default_factory=dict)

    def get(self, ref: QualifiedColumn) -> Optional[ColumnCellIndex]:
        return self.columns.get(ref)


def _column_seed(base_seed: int, ref: QualifiedColumn) -> int:
    digest = hashlib.blake2b(
        f"{base_seed}:{ref.key[0]}.{ref.key[1]}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little") % (2**31)


def _unique_values(col: Column) -> tuple[list[CellValue], list[list[int]]]:
    grouped: dict = {}
    originals: dict = {}
    for idx, v in enumerate(col.values):
        if v is None:
            continue
        k = cell_key(v)
        grouped.setdefault(k, []).append(idx)
        originals.setdefault(k, v)
    keys = sorted(grouped, key=lambda k: (k[0], canonical_str(originals[k])))
    return [originals[k] for k in keys], [grouped[k] for k in keys]


def build_cell_index(
    db: Database,
    embedder: EmbeddingProvider,
    seed: int = 0,
    hnsw_m: int = 16,
    hnsw_ef_construction: int = 200,
) -> CellIndex:
    """Per column: aggregate unique non-null values into a row map; for
    non-numeric columns additionally embed each unique value once and build
    an HNSW graph over the embeddings."""
    index = CellIndex()
    for table in db.tables:
        for col in table.columns:
            ref = QualifiedColumn(table.name, col.name)
            values, rows = _unique_values(col)
            numeric = is_numeric_column(col)
            ann = None
            if not numeric and values:
                try:
                    vectors = embedder.embed([canonical_str(v) for v in values])
                except GatewayError as exc:
                    raise IndexBuildError(
                        f"embedding failed for column {ref}: {exc}", index, ref
                    ) from exc
                ann = HNSWIndex(
                    dimension=vectors.shape[1],
                    m=hnsw_m,
                    ef_construction=hnsw_ef_construction,
                    seed=_column_seed(seed, ref),
                )
                ann.add_batch(vectors)
            index.columns[ref] = ColumnCellIndex(
                column=ref, numeric=numeric, values=values, rows=rows, ann=ann
            )
    return index


def query_index(
    index: CellIndex,
    column: QualifiedColumn,
    query_vector: np.ndarray,
    k: int,
    ef: Optional[int] = None,
) -> list[tuple[CellValue, float, list[int]]]:
    """ANN lookup over a non-numeric column's unique values.

    Returns up to k (value, similarity, row indices) triples, similarity
    descending with lexicographic value order breaking ties.
    """
    entry = index.get(column)
    if entry is None:
        raise PreprocessError(f"column {column} not present in cell index")
    if entry.numeric:
        raise PreprocessError(f"column {column} is numeric; semantic queries unsupported")
    if entry.ann is None or not entry.values:
        return []
    hits = entry.ann.search(np.asarray(query_vector), min(k, len(entry.values)))
    ranked = sorted(
        hits, key=lambda pair: (-pair[1], canonical_str(entry.values[pair[0]]))
    )
    return [(entry.values[i], sim, entry.rows[i]) for i, sim in ranked[:k]]


# --- persistence ------------------------------------------------------------


def _artifact_name(ref: QualifiedColumn) -> str:
    return f"{ref.table_name}.{ref.column_name}"


def save_artifacts(
    out_dir: str | Path,
    profiles: Sequence[ColumnProfile],
    schema: SemanticSchema,
    joins: JoinGraph,
    index: CellIndex,
) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "profiles.json").write_text(
        json.dumps([p.to_json_dict() for p in profiles], sort_keys=True, indent=2),
        encoding="utf-8",
    )
    (out / "schema.json").write_text(
        json.dumps(schema.to_json_dict(), sort_keys=True, indent=2), encoding="utf-8"
    )
    (out / "joins.json").write_text(
        json.dumps(joins.to_json_dict(), sort_keys=True, indent=2), encoding="utf-8"
    )
    index_dir = out / "index"
    rowmap_dir = out / "rowmap"
    index_dir.mkdir(exist_ok=True)
    rowmap_dir.mkdir(exist_ok=True)
    for ref, entry in sorted(index.columns.items(), key=lambda kv: kv[0].key):
        name = _artifact_name(ref)
        (rowmap_dir / f"{name}.json").write_text(
            json.dumps(
                {
                    "column": str(ref),
                    "numeric": entry.numeric,
                    "values": entry.values,
                    "rows": entry.rows,
                },
                sort_keys=True,
                separators=(",", ":"),
            ),
            encoding="utf-8",
        )
        if entry.ann is not None:
            entry.ann.save(index_dir / f"{name}.hnsw")


def load_artifacts(out_dir: str | Path):
    """Load (profiles, schema, joins, index) from a preprocessing directory."""
    out = Path(out_dir)
    if not (out / "schema.json").exists():
        raise PreprocessError(f"artifacts missing in {out}")
    profile_data = json.loads((out / "profiles.json").read_text(encoding="utf-8"))
    profiles = [
        ColumnProfile(
            column=QualifiedColumn.parse(p["column"]),
            declared_type=DeclaredType(p["declared_type"]),
            distinct_count=p["distinct_count"],
            row_count=p["row_count"],
            uniqueness=p["uniqueness"],
            top_values=[(v, n) for v, n in p["top_values"]],
            longest_example=p["longest_example"],
            shortest_example=p["shortest_example"],
        )
        for p in profile_data
    ]
    schema = SemanticSchema.from_json_dict(
        json.loads((out / "schema.json").read_text(encoding="utf-8"))
    )
    joins = JoinGraph.from_json_dict(
        json.loads((out / "joins.json").read_text(encoding="utf-8"))
    )
    index = CellIndex()
    rowmap_dir = out / "rowmap"
    index_dir = out / "index"
    if rowmap_dir.exists():
        for path in sorted(rowmap_dir.glob("*.json")):
            data = json.loads(path.read_text(encoding="utf-8"))
            ref = QualifiedColumn.parse(data["column"])
            ann_path = index_dir / f"{_artifact_name(ref)}.hnsw"
            ann = HNSWIndex.load(ann_path) if ann_path.exists() else None
            index.columns[ref] = ColumnCellIndex(
                column=ref,
                numeric=data["numeric"],
                values=data["values"],
                rows=[list(r) for r in data["rows"]],
                ann=ann,
            )
    return profiles, schema, joins, index
