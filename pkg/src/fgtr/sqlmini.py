"""Minimal SQL analysis for benchmark construction.

Supports a single SELECT over INNER/LEFT joins with WHERE
(boolean/comparison/LIKE/IN/BETWEEN), GROUP BY, HAVING, ORDER BY and
LIMIT. Set operations and subqueries are rejected with
``unsupported_sql`` so callers can skip those samples.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

from .model import Database, QualifiedColumn


class SqlError(Exception):
    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<string>'(?:[^']|'')*')
  | (?P<number>\d+\.\d+|\.\d+|\d+)
  | (?P<qident>"[^"]+"|`[^`]+`|\[[^\]]+\])
  | (?P<word>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op><>|!=|>=|<=|\|\||[=<>+\-*/%(),.;])
    """,
    re.VERBOSE,
)

_KEYWORDS = frozenset(
    """select from where group by having order limit offset join inner left right
    full outer cross on as and or not in between like glob is null distinct asc
    desc union intersect except exists case when then else end cast""".split()
)

_SET_OPS = frozenset({"union", "intersect", "except"})


@dataclass
class Token:
    kind: str
    text: str
    start: int
    end: int

    @property
    def lower(self) -> str:
        return self.text.lower()


def tokenize(sql: str) -> list[Token]:
    tokens = []
    pos = 0
    while pos < len(sql):
        m = _TOKEN_RE.match(sql, pos)
        if not m:
            raise SqlError("unsupported_sql", f"cannot tokenize at offset {pos}: {sql[pos:pos+10]!r}")
        pos = m.end()
        kind = m.lastgroup
        if kind == "ws":
            continue
        text = m.group()
        if kind == "qident":
            text = text[1:-1]
            kind = "word"
        tokens.append(Token(kind, text, m.start(), m.end()))
    return tokens


@dataclass
class TableRef:
    name: str
    alias: Optional[str] = None


@dataclass
class ParsedQuery:
    sql: str
    tokens: list[Token]
    tables: list[TableRef]
    select_span: tuple[int, int]  # token indices of the select list
    from_span: tuple[int, int]  # token indices of FROM..(before GROUP/ORDER/LIMIT, after WHERE)
    where_span: Optional[tuple[int, int]]
    group_span: Optional[tuple[int, int]]
    having_span: Optional[tuple[int, int]]
    order_span: Optional[tuple[int, int]]
    on_spans: list[tuple[int, int]] = field(default_factory=list)
    select_aliases: set[str] = field(default_factory=set)

    def alias_map(self) -> dict[str, str]:
        """alias/table-name (lowercase) -> table name."""
        mapping = {}
        for ref in self.tables:
            if ref.alias:
                mapping[ref.alias.lower()] = ref.name
            mapping.setdefault(ref.name.lower(), ref.name)
        return mapping

    def preferred_qualifier(self, table_name: str) -> str:
        """Qualifier usable in rewritten SQL: the table's alias if it has one."""
        for ref in self.tables:
            if ref.name.lower() == table_name.lower():
                return ref.alias or ref.name
        return table_name


_CLAUSE_STARTERS = {"where", "group", "having", "order", "limit"}


def parse_query(sql: str) -> ParsedQuery:
    tokens = tokenize(sql)
    if not tokens or tokens[0].lower != "select":
        raise SqlError("unsupported_sql", "only SELECT statements are supported")
    selects = [t for t in tokens if t.kind == "word" and t.lower == "select"]
    if len(selects) > 1:
        raise SqlError("unsupported_sql", "nested subqueries are not supported")
    for t in tokens:
        if t.kind == "word" and t.lower in _SET_OPS:
            raise SqlError("unsupported_sql", f"set operation {t.text!r} not supported")

    def clause_index(name: str, start: int = 0) -> Optional[int]:
        for i in range(start, len(tokens)):
            if tokens[i].kind == "word" and tokens[i].lower == name:
                return i
        return None

    from_idx = clause_index("from")
    if from_idx is None:
        raise SqlError("unsupported_sql", "missing FROM clause")
    select_start = 1
    if tokens[select_start].lower == "distinct":
        select_start += 1
    where_idx = clause_index("where", from_idx)
    group_idx = clause_index("group", from_idx)
    having_idx = clause_index("having", from_idx)
    order_idx = clause_index("order", from_idx)
    limit_idx = clause_index("limit", from_idx)

    end = len(tokens)
    if tokens and tokens[-1].kind == "op" and tokens[-1].text == ";":
        end -= 1

    def bound(*candidates):
        live = [c for c in candidates if c is not None]
        return min(live) if live else end

    from_end = bound(where_idx, group_idx, having_idx, order_idx, limit_idx)
    where_end = bound(group_idx, having_idx, order_idx, limit_idx)
    group_end = bound(having_idx, order_idx, limit_idx)
    having_end = bound(order_idx, limit_idx)
    order_end = bound(limit_idx)

    tables, on_spans = _parse_from(tokens, from_idx + 1, from_end)
    select_aliases = _select_aliases(tokens, select_start, from_idx)
    return ParsedQuery(
        sql=sql,
        tokens=tokens,
        tables=tables,
        select_span=(select_start, from_idx),
        from_span=(from_idx, where_end if where_idx is not None else from_end),
        where_span=(where_idx + 1, where_end) if where_idx is not None else None,
        group_span=(group_idx + 2, group_end) if group_idx is not None else None,
        having_span=(having_idx + 1, having_end) if having_idx is not None else None,
        order_span=(order_idx + 2, order_end) if order_idx is not None else None,
        on_spans=on_spans,
        select_aliases=select_aliases,
    )


_JOIN_WORDS = {"join", "inner", "left", "right", "full", "outer", "cross"}


def _parse_from(tokens: list[Token], start: int, end: int) -> tuple[list[TableRef], list]:
    tables: list[TableRef] = []
    on_spans = []
    i = start
    while i < end:
        tok = tokens[i]
        if tok.kind == "word" and tok.lower in ("right", "full", "cross"):
            raise SqlError("unsupported_sql", f"{tok.text.upper()} joins are not supported")
        if tok.kind == "word" and tok.lower in ("inner", "left", "outer", "join"):
            i += 1
            continue
        if tok.kind == "op" and tok.text == ",":
            i += 1
            continue
        if tok.kind == "word" and tok.lower == "on":
            on_start = i + 1
            j = on_start
            while j < end and not (
                tokens[j].kind == "word" and tokens[j].lower in _JOIN_WORDS
            ) and not (tokens[j].kind == "op" and tokens[j].text == ","):
                j += 1
            on_spans.append((on_start, j))
            i = j
            continue
        if tok.kind != "word":
            raise SqlError("unsupported_sql", f"unexpected token {tok.text!r} in FROM clause")
        name = tok.text
        alias = None
        i += 1
        if i < end and tokens[i].kind == "word" and tokens[i].lower == "as":
            i += 1
            if i >= end or tokens[i].kind != "word":
                raise SqlError("unsupported_sql", "dangling AS in FROM clause")
            alias = tokens[i].text
            i += 1
        elif (
            i < end
            and tokens[i].kind == "word"
            and tokens[i].lower not in _KEYWORDS
        ):
            alias = tokens[i].text
            i += 1
        tables.append(TableRef(name=name, alias=alias))
    if not tables:
        raise SqlError("unsupported_sql", "empty FROM clause")
    return tables, on_spans


def _select_aliases(tokens: list[Token], start: int, end: int) -> set[str]:
    aliases = set()
    for i in range(start, end):
        if tokens[i].kind == "word" and tokens[i].lower == "as":
            if i + 1 < end and tokens[i + 1].kind == "word":
                aliases.add(tokens[i + 1].lower)
    return aliases


def _resolve_unqualified(name: str, query: ParsedQuery, db: Database) -> QualifiedColumn:
    owners = []
    for ref in query.tables:
        table = db.find_table(ref.name)
        if table is not None and table.find_column(name) is not None:
            owners.append(table.name)
    if not owners:
        raise SqlError("unknown_column", f"column {name!r} not found in FROM tables")
    if len(set(o.lower() for o in owners)) > 1:
        raise SqlError("ambiguous_column", f"column {name!r} exists in tables {owners}")
    return QualifiedColumn(owners[0], name)


def _expand_star(query: ParsedQuery, db: Database, table_name: Optional[str]) -> set[QualifiedColumn]:
    refs = set()
    targets = (
        [t for t in query.tables if t.name.lower() == table_name.lower()]
        if table_name
        else query.tables
    )
    for tref in targets:
        table = db.find_table(tref.name)
        if table is None:
            raise SqlError("unknown_table", f"table {tref.name!r} not in database")
        for col in table.columns:
            refs.add(QualifiedColumn(table.name, col.name))
    return refs


def _extract_span(
    query: ParsedQuery, db: Database, span: tuple[int, int], allow_select_aliases: bool
) -> set[QualifiedColumn]:
    tokens = query.tokens
    aliases = query.alias_map()
    refs: set[QualifiedColumn] = set()
    i, end = span
    while i < end:
        tok = tokens[i]
        if tok.kind == "op" and tok.text == "*":
            refs |= _expand_star(query, db, None)
            i += 1
            continue
        # alias definitions (x AS y) never reference a column
        if tok.kind == "word" and tok.lower == "as":
            i += 2
            continue
        if tok.kind != "word" or tok.lower in _KEYWORDS:
            i += 1
            continue
        # function call; count(*) references no column, so its star must
        # not expand like a projection star
        if i + 1 < end and tokens[i + 1].kind == "op" and tokens[i + 1].text == "(":
            if (
                i + 3 < end
                and tokens[i + 2].kind == "op"
                and tokens[i + 2].text == "*"
                and tokens[i + 3].kind == "op"
                and tokens[i + 3].text == ")"
            ):
                i += 4
            else:
                i += 1
            continue
        # qualified reference
        if i + 2 < end and tokens[i + 1].kind == "op" and tokens[i + 1].text == ".":
            qualifier = tok.text
            target = tokens[i + 2]
            table_name = aliases.get(qualifier.lower())
            if table_name is None:
                raise SqlError("unknown_table", f"unknown table or alias {qualifier!r}")
            if target.kind == "op" and target.text == "*":
                refs |= _expand_star(query, db, table_name)
            else:
                table = db.find_table(table_name)
                if table is None or table.find_column(target.text) is None:
                    raise SqlError(
                        "unknown_column", f"column {qualifier}.{target.text} not in database"
                    )
                refs.add(QualifiedColumn(table.name, target.text))
            i += 3
            continue
        name = tok.text
        if allow_select_aliases and name.lower() in query.select_aliases:
            i += 1
            continue
        if name.lower() in aliases and name.lower() not in {
            c.column_name.lower() for c in refs
        }:
            # bare table/alias name with no dot: not a column reference
            has_col = any(
                db.find_table(t.name) is not None
                and db.find_table(t.name).find_column(name) is not None
                for t in query.tables
            )
            if not has_col:
                i += 1
                continue
        refs.add(_resolve_unqualified(name, query, db))
        i += 1
    return refs


def extract_columns(sql: str, db: Database) -> set[QualifiedColumn]:
    """All columns referenced anywhere in the query, fully qualified."""
    query = parse_query(sql)
    for ref in query.tables:
        if db.find_table(ref.name) is None:
            raise SqlError("unknown_table", f"table {ref.name!r} not in database")
    refs: set[QualifiedColumn] = set()
    refs |= _extract_span(query, db, query.select_span, allow_select_aliases=False)
    for span in query.on_spans:
        refs |= _extract_span(query, db, span, allow_select_aliases=False)
    for span in (query.where_span, query.group_span, query.having_span):
        if span is not None:
            refs |= _extract_span(query, db, span, allow_select_aliases=False)
    if query.order_span is not None:
        refs |= _extract_span(query, db, query.order_span, allow_select_aliases=True)
    return refs


def rewrite_select(sql: str, columns: set[QualifiedColumn], db: Database = None) -> str:
    """Replace the SELECT list with the full qualified column set.

    FROM/JOIN/WHERE are preserved verbatim; DISTINCT, aggregates, GROUP BY,
    HAVING, ORDER BY and LIMIT are dropped since they restrict or transform
    rows beyond the cell content the question needs.
    """
    query = parse_query(sql)
    select_items = []
    for ref in sorted(columns):
        qualifier = query.preferred_qualifier(ref.table_name)
        select_items.append(f"{qualifier}.{ref.column_name}")
    from_start_tok = query.tokens[query.from_span[0]]
    from_end_idx = query.from_span[1]
    if from_end_idx >= len(query.tokens):
        tail = sql[from_start_tok.start :]
    else:
        tail = sql[from_start_tok.start : query.tokens[from_end_idx].start]
    return f"SELECT {', '.join(select_items)} {tail.rstrip().rstrip(';')}"
