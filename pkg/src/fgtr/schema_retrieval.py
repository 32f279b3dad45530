"""Online stage 1: question parsing, schema mapping with consistency
voting, and schema filling with primary/foreign join keys.

Mapping runs K independent chat completions over deterministically
shuffled schema listings and tallies the returned columns; a column
survives when its frequency reaches theta * K. Filling then augments the
selection with each touched table's primary key and the join-key columns
along shortest join-graph paths, including bridge tables.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import networkx as nx

from .llm import (
    ChatProvider,
    ChatRequest,
    GatewayError,
    complete_with_reprompt,
    extract_first_json,
    parse_column_selection,
    render_prompt,
)
from .model import Database, ModelError, QualifiedColumn
from .preprocess import JoinCandidate, JoinGraph, SemanticSchema

logger = logging.getLogger(__name__)

DEFAULT_K = 5
DEFAULT_THETA = 0.6

_STOPWORDS = frozenset(
    "a an and are as at be by for from has have how in is it many much of on or "
    "that the to was were what when where which who with".split()
)


@dataclass
class ParsedQuestion:
    question: str
    key_elements: list[str]
    hinted_columns: list[QualifiedColumn] = field(default_factory=list)
    degraded: bool = False


@dataclass
class VoteTally:
    counts: dict[QualifiedColumn, int]
    k: int
    theta: float
    dropped: list[str] = field(default_factory=list)
    failed_iterations: int = 0


@dataclass
class SchemaSelection:
    selected: set[QualifiedColumn]
    filled: set[QualifiedColumn]
    join_edges_used: list[JoinCandidate]
    tally: Optional[VoteTally] = None
    diagnostics: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "selected": sorted(str(c) for c in self.selected),
            "filled": sorted(str(c) for c in self.filled),
            "join_edges_used": [e.to_json_dict() for e in self.join_edges_used],
            "tally": (
                {str(c): n for c, n in sorted(self.tally.counts.items(), key=lambda kv: kv[0].key)}
                if self.tally
                else {}
            ),
            "diagnostics": self.diagnostics,
        }


def _iteration_rng(seed: int, iteration: int) -> random.Random:
    digest = hashlib.blake2b(f"{seed}:{iteration}".encode(), digest_size=8).digest()
    return random.Random(int.from_bytes(digest, "little"))


def table_structure(
    db: Database,
    schema: SemanticSchema,
    seed: Optional[int] = None,
    iteration: Optional[int] = None,
) -> str:
    """Render the schema as a JSON listing of column name: description.

    When (seed, iteration) is given, table order and within-table column
    order are shuffled with a deterministic permutation to counter
    positional bias; the permutation depends only on (seed, iteration).
    """
    tables = list(db.tables)
    orders = {t.name: list(range(len(t.columns))) for t in tables}
    if seed is not None and iteration is not None:
        rng = _iteration_rng(seed, iteration)
        rng.shuffle(tables)
        for t in tables:
            rng.shuffle(orders[t.name])
    payload = {}
    for t in tables:
        cols = {}
        for i in orders[t.name]:
            col = t.columns[i]
            ref = QualifiedColumn(t.name, col.name)
            cols[col.name] = schema.describe(ref)
        payload[t.name] = {
            "description": schema.table_descriptions.get(t.name, ""),
            "columns": cols,
        }
    return json.dumps(payload, ensure_ascii=False, indent=1)


def fallback_key_elements(question: str) -> list[str]:
    tokens = [t for t in re.findall(r"[\w'-]+", question)]
    content = [t for t in tokens if t.lower() not in _STOPWORDS]
    picked = content or tokens
    seen, out = set(), []
    for t in picked:
        if t.lower() not in seen:
            seen.add(t.lower())
            out.append(t)
    return out


def _parse_question_response(raw: str) -> dict:
    obj = extract_first_json(raw)
    if "key_elements" not in obj or not isinstance(obj["key_elements"], list):
        from .llm import ParseError

        raise ParseError("missing_key", "question parsing response missing 'key_elements'")
    return obj


def parse_question(
    question: str,
    schema: SemanticSchema,
    db: Database,
    chat: ChatProvider,
    prompt_dir: Path = None,
    temperature: float = 0.0,
) -> ParsedQuestion:
    if not question.strip():
        raise GatewayError("empty_question", "question must be non-empty")
    prompt = render_prompt(
        "question_parsing",
        {"TABLESTRUCTURE": table_structure(db, schema), "QUESTION": question},
        prompt_dir,
    )
    parsed = None
    try:
        parsed = complete_with_reprompt(
            chat, ChatRequest(prompt=prompt, temperature=temperature), _parse_question_response
        )
    except GatewayError as exc:
        logger.warning("question parsing failed: %s", exc)
    if parsed is None:
        logger.warning("question parsing degraded to token fallback")
        return ParsedQuestion(
            question=question,
            key_elements=fallback_key_elements(question),
            degraded=True,
        )
    elements, seen = [], set()
    for el in parsed["key_elements"]:
        el = str(el)
        if el.lower() not in seen:
            seen.add(el.lower())
            elements.append(el)
    hinted = []
    for entry in parsed.get("columns", []) or []:
        try:
            ref = QualifiedColumn.parse(str(entry))
        except ModelError:
            continue
        if db.has_column(ref):
            hinted.append(ref)
    return ParsedQuestion(question=question, key_elements=elements, hinted_columns=hinted)


def map_schema(
    parsed: ParsedQuestion,
    schema: SemanticSchema,
    db: Database,
    chat: ChatProvider,
    k: int = DEFAULT_K,
    theta: float = DEFAULT_THETA,
    seed: int = 0,
    prompt_dir: Path = None,
    temperature: float = 0.2,
    max_workers: int = 4,
) -> VoteTally:
    """Run K schema-mapping completions and tally the validated columns.

    Each iteration sees an independently shuffled schema listing; columns
    the model names that do not exist in the database are dropped but
    recorded in the tally diagnostics.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0 < theta <= 1:
        raise ValueError("theta must be in (0, 1]")
    elements = json.dumps(parsed.key_elements, ensure_ascii=False)

    def run(iteration: int):
        prompt = render_prompt(
            "schema_mapping",
            {
                "TABLESTRUCTURE": table_structure(db, schema, seed, iteration),
                "QUESTION": parsed.question,
                "KEYELEMENTS": elements,
            },
            prompt_dir,
        )
        request = ChatRequest(prompt=prompt, temperature=temperature, seed=seed + iteration)
        return complete_with_reprompt(chat, request, parse_column_selection)

    responses = []
    failures = 0
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = [pool.submit(run, i) for i in range(k)]
        for fut in futures:
            try:
                responses.append(fut.result())
            except GatewayError as exc:
                logger.warning("schema mapping iteration failed: %s", exc)
                responses.append(None)
                failures += 1
    if failures == k:
        raise GatewayError("mapping_unavailable", "all schema mapping iterations failed")

    counts: dict[QualifiedColumn, int] = {}
    dropped: list[str] = []
    for resp in responses:
        if resp is None:
            continue
        iteration_cols = set()
        for ref in resp.columns:
            if not db.has_column(ref):
                dropped.append(str(ref))
                continue
            iteration_cols.add(ref)
        for ref in iteration_cols:
            counts[ref] = counts.get(ref, 0) + 1
    return VoteTally(counts=counts, k=k, theta=theta, dropped=dropped, failed_iterations=failures)


def select_columns(tally: VoteTally) -> set[QualifiedColumn]:
    """Keep columns whose vote count reaches theta * K (exact >= comparison)."""
    threshold = tally.theta * tally.k
    return {c for c, n in tally.counts.items() if n >= threshold}


def _pair_graph(joins: JoinGraph) -> tuple[nx.Graph, dict]:
    """Collapse join candidates onto a table-level graph.

    Edge weight is the best candidate weight for the pair; all accepted
    candidates for a pair are retained for key extraction (composite
    declared keys contribute every column)."""
    graph = nx.Graph()
    for node in joins.nodes:
        graph.add_node(node.lower())
    by_pair: dict[tuple[str, str], list[JoinCandidate]] = {}
    for edge in joins.edges:
        pair = tuple(sorted((edge.left.table_name.lower(), edge.right.table_name.lower())))
        by_pair.setdefault(pair, []).append(edge)
    for (a, b), cands in by_pair.items():
        weight = max(c.weight for c in cands)
        graph.add_edge(a, b, weight=weight)
    return graph, by_pair


def _best_path(graph: nx.Graph, a: str, b: str) -> Optional[list[str]]:
    """Min-hop path; ties broken by max total weight, then lexicographic."""
    if a not in graph or b not in graph:
        return None
    try:
        paths = list(nx.all_shortest_paths(graph, a, b))
    except nx.NetworkXNoPath:
        return None

    def path_weight(path):
        total = 0.0
        for x, y in zip(path, path[1:]):
            w = graph.edges[x, y]["weight"]
            if math.isinf(w):
                return math.inf
            total += w
        return total

    return min(paths, key=lambda p: (-path_weight(p), tuple(p)))


def fill_schema(
    selected: set[QualifiedColumn], db: Database, joins: JoinGraph
) -> SchemaSelection:
    """Augment the selection with primary keys and shortest-path join keys.

    Keys of intermediate bridge tables on the chosen paths are included
    even when those tables own no selected column, so downstream joins
    stay executable.
    """
    filled = set(selected)
    touched = sorted({c.table_name.lower() for c in selected})
    diagnostics: dict = {}

    for tname in touched:
        table = db.find_table(tname)
        if table is None:
            continue
        for pk in table.primary_key:
            filled.add(QualifiedColumn(table.name, pk))

    graph, by_pair = _pair_graph(joins)
    edges_used: list[JoinCandidate] = []
    seen_edges = set()
    disconnected = []
    for i in range(len(touched)):
        for j in range(i + 1, len(touched)):
            path = _best_path(graph, touched[i], touched[j])
            if path is None:
                disconnected.append([touched[i], touched[j]])
                continue
            for a, b in zip(path, path[1:]):
                pair = tuple(sorted((a, b)))
                for cand in by_pair.get(pair, []):
                    key = (cand.left.key, cand.right.key)
                    if key in seen_edges:
                        continue
                    seen_edges.add(key)
                    edges_used.append(cand)
                    filled.add(cand.left)
                    filled.add(cand.right)

    # declared FKs between touched tables count as join keys even off-path
    touched_set = set(touched)
    for tname in touched:
        table = db.find_table(tname)
        if table is None:
            continue
        for local, remote in table.declared_foreign_keys:
            if remote.table_name.lower() in touched_set:
                filled.add(QualifiedColumn(table.name, local))
                filled.add(remote)

    filled = {c for c in filled if db.has_column(c)}
    if disconnected:
        diagnostics["disconnected_tables"] = disconnected
    return SchemaSelection(
        selected=set(selected),
        filled=filled,
        join_edges_used=edges_used,
        diagnostics=diagnostics,
    )


def retrieve_schema(
    question: str,
    db: Database,
    schema: SemanticSchema,
    joins: JoinGraph,
    chat: ChatProvider,
    k: int = DEFAULT_K,
    theta: float = DEFAULT_THETA,
    seed: int = 0,
    prompt_dir: Path = None,
    temperature: float = 0.2,
) -> SchemaSelection:
    """parse_question -> map_schema -> select_columns -> fill_schema."""
    parsed = parse_question(question, schema, db, chat, prompt_dir=prompt_dir)
    tally = map_schema(
        parsed,
        schema,
        db,
        chat,
        k=k,
        theta=theta,
        seed=seed,
        prompt_dir=prompt_dir,
        temperature=temperature,
    )
    selected = select_columns(tally)
    selection = fill_schema(selected, db, joins)
    selection.tally = tally
    if tally.dropped:
        selection.diagnostics["dropped_columns"] = tally.dropped
    if parsed.degraded:
        selection.diagnostics["degraded_parsing"] = True
    return selection
