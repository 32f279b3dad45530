"""Command-line entry point: preprocess, retrieve, eval, bench-build.

All stdout payloads are single-document JSON or JSON-lines; logs go to
stderr. Exit codes: 0 success, 1 partial (skips or diagnostics), 2 fatal.
"""

from __future__ import annotations

import csv as csv_module
import json
import logging
import sys
from pathlib import Path

import click

from . import bench as bench_mod
from . import metrics as metrics_mod
from .cell_retrieval import retrieve
from .config import ConfigError, load_config
from .llm import (
    GatewayError,
    HashingEmbedder,
    HttpChatProvider,
    HttpEmbeddingProvider,
    ScriptedChatProvider,
)
from .model import ModelError, QualifiedColumn, SubTable, load_database
from .preprocess import (
    PreprocessError,
    build_cell_index,
    discover_joins,
    load_artifacts,
    profile_columns,
    save_artifacts,
    semantize_schema,
)

logging.basicConfig(stream=sys.stderr, level=logging.WARNING, format="%(levelname)s %(message)s")
logger = logging.getLogger(__name__)


def _fatal(code: str, message: str) -> None:
    json.dump({"error": code, "message": message}, sys.stderr)
    sys.stderr.write("\n")
    sys.exit(2)


def _providers(mock_llm, mock_embed, cfg):
    if mock_llm:
        chat = ScriptedChatProvider.from_file(mock_llm)
    else:
        chat = HttpChatProvider(model=cfg.chat_model)
    if mock_embed:
        embed = HashingEmbedder(seed=cfg.seed)
    else:
        embed = HttpEmbeddingProvider(model=cfg.embed_model)
    return chat, embed


_shared_options = [
    click.option("--config", "config_path", type=click.Path(), help="JSON config file"),
    click.option("--seed", type=int, default=None, help="run seed (reproducibility)"),
    click.option("--mock-llm", type=click.Path(exists=True), default=None,
                 help="scripted chat provider (JSON prompt-hash -> response)"),
    click.option("--mock-embed", is_flag=True, default=False,
                 help="deterministic offline embedder"),
]


def shared_options(fn):
    for opt in reversed(_shared_options):
        fn = opt(fn)
    return fn


@click.group()
def main():
    """Fine-grained multi-table retrieval."""


@main.command("preprocess")
@click.option("--db", "db_path", required=True, type=click.Path(), help="database path")
@click.option("--format", "db_format", type=click.Choice(["sqlite", "csv_dir"]), default=None)
@click.option("--out", "artifact_dir", required=True, type=click.Path())
@click.option("--tau-join", type=float, default=None)
@shared_options
def cmd_preprocess(db_path, db_format, artifact_dir, tau_join, config_path, seed, mock_llm, mock_embed):
    """Build and persist offline artifacts for a database."""
    try:
        cfg = load_config(
            config_path, db_path=db_path, db_format=db_format,
            artifact_dir=artifact_dir, tau_join=tau_join, seed=seed,
        )
    except ConfigError as exc:
        _fatal("bad_config", str(exc))
    if not Path(cfg.db_path).exists():
        _fatal("db_not_found", f"database path does not exist: {cfg.db_path}")
    try:
        db = load_database(cfg.db_path, cfg.db_format)
    except ModelError as exc:
        _fatal("db_load_failed", str(exc))
    chat, embed = _providers(mock_llm, mock_embed, cfg)
    try:
        profiles = profile_columns(db)
        schema = semantize_schema(db, profiles, chat, prompt_dir=_prompt_dir(cfg))
        joins = discover_joins(db, profiles, schema, embed, tau_join=cfg.tau_join)
        index = build_cell_index(db, embed, seed=cfg.seed)
        save_artifacts(cfg.artifact_dir, profiles, schema, joins, index)
    except (GatewayError, PreprocessError) as exc:
        _fatal("preprocess_failed", str(exc))
    indexed_values = sum(len(e.values) for e in index.columns.values())
    click.echo(json.dumps({
        "tables": len(db.tables),
        "columns": len(profiles),
        "indexed_values": indexed_values,
        "join_edges": len(joins.edges),
        "artifact_dir": str(cfg.artifact_dir),
    }))


def _prompt_dir(cfg):
    return Path(cfg.prompt_dir) if cfg.prompt_dir else None


@main.command("retrieve")
@click.option("--db", "db_path", required=True, type=click.Path())
@click.option("--format", "db_format", type=click.Choice(["sqlite", "csv_dir"]), default=None)
@click.option("--artifacts", "artifact_dir", required=True, type=click.Path())
@click.option("--question", default=None, help="single question")
@click.option("--questions", "questions_file", type=click.Path(), default=None,
              help="batch file: JSON-lines with qid/question, or plain text lines")
@click.option("--k", "k_iterations", type=int, default=None)
@click.option("--theta", type=float, default=None)
@click.option("--sigma", type=float, default=None)
@click.option("--merge-mode", type=click.Choice(["union", "intersection"]), default=None)
@click.option("--row-cap", type=int, default=None)
@shared_options
def cmd_retrieve(db_path, db_format, artifact_dir, question, questions_file,
                 k_iterations, theta, sigma, merge_mode, row_cap,
                 config_path, seed, mock_llm, mock_embed):
    """Retrieve query-relevant sub-tables for one or more questions."""
    try:
        cfg = load_config(
            config_path, db_path=db_path, db_format=db_format, artifact_dir=artifact_dir,
            k_iterations=k_iterations, theta=theta, sigma=sigma,
            merge_mode=merge_mode, row_cap=row_cap, seed=seed,
        )
    except ConfigError as exc:
        _fatal("bad_config", str(exc))
    if not Path(cfg.artifact_dir).exists():
        _fatal("artifacts_missing", f"artifact directory not found: {cfg.artifact_dir}")
    try:
        db = load_database(cfg.db_path, cfg.db_format)
        _, schema, joins, index = load_artifacts(cfg.artifact_dir)
    except (ModelError, PreprocessError) as exc:
        _fatal("artifacts_missing", str(exc))
    chat, embed = _providers(mock_llm, mock_embed, cfg)

    if question is None and questions_file is None:
        _fatal("no_question", "provide --question or --questions")
    if questions_file:
        entries = _read_questions(questions_file)
    else:
        entries = [{"qid": "q0", "question": question}]

    for entry in entries:
        result = retrieve(
            entry["question"], db, schema, joins, index, chat, embed,
            k=cfg.k_iterations, theta=cfg.theta, sigma=cfg.sigma, seed=cfg.seed,
            row_cap=cfg.row_cap, merge_mode=cfg.merge_mode, prompt_dir=_prompt_dir(cfg),
        )
        doc = result.to_json_dict()
        doc["qid"] = entry["qid"]
        click.echo(json.dumps(doc, ensure_ascii=False))


def _read_questions(path: str) -> list[dict]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            if line.startswith("{"):
                obj = json.loads(line)
                entries.append({"qid": str(obj.get("qid", i)), "question": obj["question"]})
            else:
                entries.append({"qid": str(i), "question": line})
    return entries


@main.command("eval")
@click.option("--retrieved", "retrieved_file", required=True, type=click.Path(exists=True),
              help="JSON-lines retrieval output (from `fgtr retrieve`)")
@click.option("--gold", "gold_file", required=True, type=click.Path(exists=True),
              help="JSON-lines gold standard (from `fgtr bench-build`)")
@click.option("--csv", "csv_out", type=click.Path(), default=None)
def cmd_eval(retrieved_file, gold_file, csv_out):
    """Score retrieval output against a gold standard."""
    retrieved = {d["qid"]: d for d in _read_jsonl(retrieved_file)}
    gold = {d["qid"]: d for d in _read_jsonl(gold_file)}
    missing = sorted(set(gold) - set(retrieved))
    if missing:
        _fatal("id_mismatch", f"retrieved output missing question ids: {missing}")

    scores = []
    for qid in sorted(gold):
        g = gold[qid]
        r = retrieved[qid]
        gold_columns = {QualifiedColumn.parse(c) for c in g["gold_columns"]}
        filled = {
            QualifiedColumn.parse(c)
            for c in r.get("schema_selection", {}).get("filled", [])
        }
        schema_score = metrics_mod.score_schema(filled, gold_columns)
        cell_score = None
        skip_reason = None
        gold_cells = {tuple(t) for t in g.get("gold_cells", [])}
        if gold_cells:
            subs = [_subtable_from_json(s) for s in r.get("sub_tables", [])]
            try:
                cell_score = metrics_mod.score_cells(subs, gold_cells, gold_columns)
            except metrics_mod.EvalError as exc:
                skip_reason = exc.code
        scores.append(
            metrics_mod.QuestionScore(
                question_id=qid, schema=schema_score, cell=cell_score,
                skipped_cell_reason=skip_reason,
            )
        )
    report = metrics_mod.aggregate(scores)
    click.echo(json.dumps(report.to_json_dict(), ensure_ascii=False))
    if csv_out:
        with open(csv_out, "w", newline="", encoding="utf-8") as fh:
            csv_module.writer(fh).writerows(report.to_csv_rows())


def _subtable_from_json(data: dict) -> SubTable:
    columns = [QualifiedColumn.parse(c) for c in data["columns"]]
    rows = [tuple(r) for r in data["rows"]]
    return SubTable(
        source_table=data["table"], columns=columns,
        row_indices=list(range(len(rows))), rows=rows,
    )


def _read_jsonl(path: str) -> list[dict]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        text = fh.read().strip()
    if not text:
        return docs
    if text.startswith("["):
        return json.loads(text)
    for line in text.splitlines():
        line = line.strip()
        if line:
            docs.append(json.loads(line))
    return docs


@main.command("bench-build")
@click.option("--dataset", "dataset_file", required=True, type=click.Path(),
              help="Spider/BIRD-style JSON (question, db_id, query)")
@click.option("--db-dir", "db_dir", required=True, type=click.Path())
@click.option("--out", "out_file", required=True, type=click.Path())
@click.option("--augment", "synonyms_file", type=click.Path(), default=None,
              help="synonym map JSON for augmentation")
@click.option("--seed", type=int, default=0)
def cmd_bench_build(dataset_file, db_dir, out_file, synonyms_file, seed):
    """Construct a fine-grained retrieval benchmark from gold SQL."""
    try:
        dataset = json.loads(Path(dataset_file).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        _fatal("bad_dataset", str(exc))
    synonyms = None
    if synonyms_file:
        try:
            synonyms = bench_mod.SynonymMap.from_file(synonyms_file)
        except (OSError, json.JSONDecodeError, bench_mod.BenchError) as exc:
            _fatal("bad_synonyms", str(exc))
    samples, skips = bench_mod.build_benchmark(dataset, db_dir, synonyms=synonyms, seed=seed)
    out_path = Path(out_file)
    with open(out_path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps(sample.to_json_dict(), ensure_ascii=False) + "\n")
    sidecar = out_path.with_suffix(out_path.suffix + ".skips.json")
    sidecar.write_text(json.dumps(skips, indent=2), encoding="utf-8")
    click.echo(json.dumps({"samples": len(samples), "skips": len(skips),
                           "out": str(out_path), "skip_file": str(sidecar)}))
    if skips:
        sys.exit(1)


if __name__ == "__main__":
    main()
