"""Fine-grained multi-table retrieval.

Hierarchical retrieval over relational databases: an offline phase builds
column profiles, natural-language schema descriptions, a join graph, and
an ANN index over unique cell values; the online phase selects
query-relevant columns (schema retrieval) and then the rows satisfying
the query's constraints (cell retrieval), emitting one compact sub-table
per relevant table.
"""

from .model import (
    CellValue,
    Column,
    Database,
    DeclaredType,
    QualifiedColumn,
    SubTable,
    Table,
    load_database,
    project,
)
from .preprocess import (
    CellIndex,
    ColumnProfile,
    JoinCandidate,
    JoinGraph,
    SemanticSchema,
    build_cell_index,
    discover_joins,
    profile_columns,
    query_index,
    semantize_schema,
)
from .schema_retrieval import (
    SchemaSelection,
    VoteTally,
    fill_schema,
    map_schema,
    parse_question,
    retrieve_schema,
    select_columns,
)
from .cell_retrieval import (
    CellMatchSet,
    ColumnConstraint,
    RetrievalResult,
    map_cells,
    merge_cells,
    parse_ranges,
    retrieve,
)
from .metrics import GoldStandard, ScoreReport, aggregate, score_cells, score_schema

__all__ = [
    "CellIndex",
    "CellMatchSet",
    "CellValue",
    "Column",
    "ColumnConstraint",
    "ColumnProfile",
    "Database",
    "DeclaredType",
    "GoldStandard",
    "JoinCandidate",
    "JoinGraph",
    "QualifiedColumn",
    "RetrievalResult",
    "SchemaSelection",
    "ScoreReport",
    "SemanticSchema",
    "SubTable",
    "Table",
    "VoteTally",
    "aggregate",
    "build_cell_index",
    "discover_joins",
    "fill_schema",
    "load_database",
    "map_cells",
    "map_schema",
    "merge_cells",
    "parse_question",
    "parse_ranges",
    "profile_columns",
    "project",
    "query_index",
    "retrieve",
    "retrieve_schema",
    "score_cells",
    "score_schema",
    "select_columns",
    "semantize_schema",
]

__version__ = "0.1.0"
