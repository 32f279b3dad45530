import json
import sqlite3

import pytest

from fgtr.llm import HashingEmbedder, prompt_hash
from fgtr.model import Column, Database, DeclaredType, QualifiedColumn, Table


def make_table(name, cols, pk=None, fks=None):
    """cols: list of (name, declared_type, values)."""
    return Table(
        name=name,
        columns=[Column(n, t, list(v)) for n, t, v in cols],
        primary_key=pk or [],
        declared_foreign_keys=fks or [],
    )


@pytest.fixture
def schools_db():
    """Toy schools/satscores/frpm database mirroring the running example."""
    schools = make_table(
        "schools",
        [
            ("CDSCode", DeclaredType.TEXT, ["c01", "c02", "c03", "c04", "c05"]),
            (
                "County",
                DeclaredType.TEXT,
                ["Contra Costa", "Los Angeles", "Alameda", "Los Angeles", "Contra Costa"],
            ),
            (
                "FundingType",
                DeclaredType.TEXT,
                ["Directly funded", "Locally funded", "Directly funded",
                 "Directly funded", "Locally funded"],
            ),
        ],
        pk=["CDSCode"],
    )
    satscores = make_table(
        "satscores",
        [
            ("cds", DeclaredType.TEXT, ["c01", "c02", "c03", "c04", "c05"]),
            ("NumTstTakr", DeclaredType.INTEGER, [100, 250, 300, 180, 520]),
            ("AvgScrMath", DeclaredType.INTEGER, [390, 410, 450, 380, 500]),
        ],
        pk=["cds"],
    )
    frpm = make_table(
        "frpm",
        [
            ("cd_code", DeclaredType.TEXT, ["c01", "c02", "c03", "c04", "c05"]),
            ("MealRate", DeclaredType.REAL, [0.1, 0.5, 0.3, 0.9, 0.2]),
        ],
        pk=["cd_code"],
    )
    return Database("schools_db", [schools, satscores, frpm])


@pytest.fixture
def embedder():
    return HashingEmbedder(seed=7)


def scripted(entries):
    """Build a prompt-hash script from {prompt: response} pairs."""
    return {prompt_hash(p): r for p, r in entries.items()}


def make_sqlite(path, ddl_and_rows):
    """ddl_and_rows: list of (create_sql, insert_sql, rows)."""
    conn = sqlite3.connect(path)
    conn.execute("PRAGMA foreign_keys=ON")
    for create_sql, insert_sql, rows in ddl_and_rows:
        conn.execute(create_sql)
        if rows:
            conn.executemany(insert_sql, rows)
    conn.commit()
    conn.close()


def column_selection(columns, reasoning="r"):
    return json.dumps({"reasoning": reasoning, "columns": columns})
