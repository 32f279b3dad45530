import json

import pytest
from click.testing import CliRunner

from fgtr.cli import main
from fgtr.llm import prompt_hash, render_prompt
from fgtr.model import save_csv_dir
from fgtr.preprocess import load_artifacts
from fgtr.schema_retrieval import fallback_key_elements, table_structure
from .conftest import column_selection, make_sqlite


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def workspace(tmp_path, schools_db):
    """CSV database plus an empty chat script (providers degrade gracefully)."""
    db_dir = tmp_path / "db"
    save_csv_dir(schools_db, db_dir)
    script = tmp_path / "script.json"
    script.write_text("{}")
    return tmp_path, db_dir, script


def run_preprocess(runner, workspace):
    tmp_path, db_dir, script = workspace
    artifacts = tmp_path / "artifacts"
    result = runner.invoke(main, [
        "preprocess", "--db", str(db_dir), "--format", "csv_dir",
        "--out", str(artifacts), "--mock-llm", str(script), "--mock-embed",
    ])
    return result, artifacts


class TestPreprocess:
    def test_builds_artifacts(self, runner, workspace):
        result, artifacts = run_preprocess(runner, workspace)
        assert result.exit_code == 0, result.output
        summary = json.loads(result.output)
        assert summary["tables"] == 3
        assert summary["columns"] == 8
        assert summary["join_edges"] >= 2
        assert (artifacts / "schema.json").exists()
        assert (artifacts / "joins.json").exists()
        assert list((artifacts / "index").glob("*.hnsw"))

    def test_missing_db_is_fatal(self, runner, tmp_path):
        result = runner.invoke(main, [
            "preprocess", "--db", str(tmp_path / "ghost"), "--out", str(tmp_path / "a"),
            "--mock-embed",
        ])
        assert result.exit_code == 2
        assert "db_not_found" in result.stderr

    def test_stdout_is_pure_json(self, runner, workspace):
        result, _ = run_preprocess(runner, workspace)
        json.loads(result.output)


class TestRetrieve:
    def _script_mapping(self, workspace, artifacts, columns, k=5, seed=0):
        """Precompute the k mapping prompts the CLI will issue and script them."""
        from fgtr.model import load_database

        _, db_dir, script = workspace
        db = load_database(db_dir, "csv_dir")
        _, schema, _, _ = load_artifacts(artifacts)
        entries = {}
        # question parsing and range parsing stay unscripted: both degrade
        for i in range(k):
            prompt = render_prompt("schema_mapping", {
                "TABLESTRUCTURE": table_structure(db, schema, seed, i),
                "QUESTION": "How many SAT takers in Alameda?",
                "KEYELEMENTS": json.dumps(
                    fallback_key_elements("How many SAT takers in Alameda?"),
                    ensure_ascii=False,
                ),
            })
            entries[prompt_hash(prompt)] = column_selection(columns)
        script.write_text(json.dumps(entries))

    def test_single_question(self, runner, workspace):
        result, artifacts = run_preprocess(runner, workspace)
        assert result.exit_code == 0
        tmp_path, db_dir, script = workspace
        self._script_mapping(
            workspace, artifacts, ["schools.County", "satscores.NumTstTakr"]
        )
        result = runner.invoke(main, [
            "retrieve", "--db", str(db_dir), "--format", "csv_dir",
            "--artifacts", str(artifacts),
            "--question", "How many SAT takers in Alameda?",
            "--mock-llm", str(script), "--mock-embed",
        ])
        assert result.exit_code == 0, result.output
        doc = json.loads(result.output.strip())
        assert doc["qid"] == "q0"
        assert "schools.County" in doc["schema_selection"]["selected"]
        assert "satscores.cds" in doc["schema_selection"]["filled"]
        tables = {s["table"] for s in doc["sub_tables"]}
        assert tables == {"schools", "satscores"}

    def test_batch_questions_jsonl(self, runner, workspace):
        result, artifacts = run_preprocess(runner, workspace)
        tmp_path, db_dir, script = workspace
        self._script_mapping(workspace, artifacts, ["schools.County"])
        questions = tmp_path / "questions.jsonl"
        questions.write_text(
            json.dumps({"qid": "alameda", "question": "How many SAT takers in Alameda?"})
            + "\n"
        )
        result = runner.invoke(main, [
            "retrieve", "--db", str(db_dir), "--format", "csv_dir",
            "--artifacts", str(artifacts), "--questions", str(questions),
            "--mock-llm", str(script), "--mock-embed",
        ])
        assert result.exit_code == 0, result.output
        doc = json.loads(result.output.strip())
        assert doc["qid"] == "alameda"

    def test_missing_artifacts_fatal(self, runner, workspace):
        tmp_path, db_dir, script = workspace
        result = runner.invoke(main, [
            "retrieve", "--db", str(db_dir), "--artifacts", str(tmp_path / "none"),
            "--question", "q", "--mock-llm", str(script), "--mock-embed",
        ])
        assert result.exit_code == 2
        assert "artifacts_missing" in result.stderr

    def test_no_question_fatal(self, runner, workspace):
        result, artifacts = run_preprocess(runner, workspace)
        tmp_path, db_dir, script = workspace
        result = runner.invoke(main, [
            "retrieve", "--db", str(db_dir), "--artifacts", str(artifacts),
            "--mock-llm", str(script), "--mock-embed",
        ])
        assert result.exit_code == 2
        assert "no_question" in result.stderr


class TestEval:
    def _write(self, path, docs):
        path.write_text("\n".join(json.dumps(d) for d in docs) + "\n")

    def test_schema_scoring(self, runner, tmp_path):
        retrieved = tmp_path / "retrieved.jsonl"
        gold = tmp_path / "gold.jsonl"
        self._write(retrieved, [{
            "qid": "q0",
            "schema_selection": {"filled": ["schools.County", "schools.CDSCode"]},
            "sub_tables": [],
        }])
        self._write(gold, [{"qid": "q0", "gold_columns": ["schools.County"]}])
        result = runner.invoke(main, [
            "eval", "--retrieved", str(retrieved), "--gold", str(gold),
        ])
        assert result.exit_code == 0, result.output
        report = json.loads(result.output)
        schema = report["aggregate"]["schema"]
        assert schema["R"] == 100.0
        assert schema["P"] == 50.0
        assert schema["SR"] == 100.0

    def test_cell_scoring_and_csv(self, runner, tmp_path):
        from fgtr.metrics import row_key

        retrieved = tmp_path / "retrieved.jsonl"
        gold = tmp_path / "gold.jsonl"
        self._write(retrieved, [{
            "qid": "q0",
            "schema_selection": {"filled": ["t.a"]},
            "sub_tables": [{"table": "t", "columns": ["t.a"], "rows": [["x"]]}],
        }])
        self._write(gold, [{
            "qid": "q0",
            "gold_columns": ["t.a"],
            "gold_cells": [["t", row_key(["x"]), "a"]],
        }])
        csv_out = tmp_path / "scores.csv"
        result = runner.invoke(main, [
            "eval", "--retrieved", str(retrieved), "--gold", str(gold),
            "--csv", str(csv_out),
        ])
        assert result.exit_code == 0, result.output
        report = json.loads(result.output)
        assert report["aggregate"]["cell"]["P"] == 100.0
        assert report["aggregate"]["cell"]["R"] == 100.0
        lines = csv_out.read_text().strip().splitlines()
        assert lines[0].startswith("qid,level")
        assert len(lines) == 3  # header + schema + cell

    def test_id_mismatch_fatal(self, runner, tmp_path):
        retrieved = tmp_path / "retrieved.jsonl"
        gold = tmp_path / "gold.jsonl"
        self._write(retrieved, [{"qid": "other", "schema_selection": {"filled": []},
                                 "sub_tables": []}])
        self._write(gold, [{"qid": "q0", "gold_columns": ["t.a"]}])
        result = runner.invoke(main, [
            "eval", "--retrieved", str(retrieved), "--gold", str(gold),
        ])
        assert result.exit_code == 2
        assert "id_mismatch" in result.stderr


class TestBenchBuild:
    def _dataset_dir(self, tmp_path):
        db_dir = tmp_path / "dbs"
        (db_dir / "tiny").mkdir(parents=True)
        make_sqlite(
            db_dir / "tiny" / "tiny.sqlite",
            [(
                "CREATE TABLE people (id INTEGER PRIMARY KEY, name TEXT, age INTEGER)",
                "INSERT INTO people VALUES (?, ?, ?)",
                [(1, "ann", 30), (2, "bob", 41)],
            )],
        )
        return db_dir

    def test_clean_build(self, runner, tmp_path):
        db_dir = self._dataset_dir(tmp_path)
        dataset = tmp_path / "dataset.json"
        dataset.write_text(json.dumps([
            {"qid": "a", "db_id": "tiny", "question": "who is 30",
             "query": "SELECT name FROM people WHERE age = 30"},
        ]))
        out = tmp_path / "bench.jsonl"
        result = runner.invoke(main, [
            "bench-build", "--dataset", str(dataset), "--db-dir", str(db_dir),
            "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        summary = json.loads(result.output)
        assert summary["samples"] == 1 and summary["skips"] == 0
        sample = json.loads(out.read_text().strip())
        assert sample["qid"] == "a"
        assert sample["gold_columns"] == ["people.age", "people.name"]

    def test_skips_set_exit_code(self, runner, tmp_path):
        db_dir = self._dataset_dir(tmp_path)
        dataset = tmp_path / "dataset.json"
        dataset.write_text(json.dumps([
            {"qid": "a", "db_id": "tiny", "question": "q",
             "query": "SELECT name FROM people UNION SELECT name FROM people"},
        ]))
        out = tmp_path / "bench.jsonl"
        result = runner.invoke(main, [
            "bench-build", "--dataset", str(dataset), "--db-dir", str(db_dir),
            "--out", str(out),
        ])
        assert result.exit_code == 1
        skips = json.loads((tmp_path / "bench.jsonl.skips.json").read_text())
        assert skips[0]["reason"] == "unsupported_sql"

    def test_bad_dataset_fatal(self, runner, tmp_path):
        result = runner.invoke(main, [
            "bench-build", "--dataset", str(tmp_path / "nope.json"),
            "--db-dir", str(tmp_path), "--out", str(tmp_path / "o.jsonl"),
        ])
        assert result.exit_code == 2
