import json
import math

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from fgtr.llm import CallableChatProvider, GatewayError
from fgtr.model import Database, DeclaredType, QualifiedColumn
from fgtr.preprocess import JoinCandidate, JoinGraph, SemanticSchema
from fgtr.schema_retrieval import (
    ParsedQuestion,
    VoteTally,
    fallback_key_elements,
    fill_schema,
    map_schema,
    parse_question,
    retrieve_schema,
    select_columns,
    table_structure,
)
from .conftest import column_selection, make_table


def simple_schema(db):
    schema = SemanticSchema()
    for t in db.tables:
        schema.table_descriptions[t.name] = f"table {t.name}"
        for c in t.columns:
            schema.column_descriptions[QualifiedColumn(t.name, c.name)] = f"{c.name} values"
    return schema


def schools_joins():
    return JoinGraph(
        nodes=["schools", "satscores", "frpm"],
        edges=[
            JoinCandidate(
                QualifiedColumn("satscores", "cds"),
                QualifiedColumn("schools", "CDSCode"),
                0.9, 1.0, 1.0, 1.9,
            ),
            JoinCandidate(
                QualifiedColumn("frpm", "cd_code"),
                QualifiedColumn("schools", "CDSCode"),
                0.8, 1.0, 1.0, 1.8,
            ),
        ],
    )


class TestTableStructure:
    def test_plain_listing(self, schools_db):
        schema = simple_schema(schools_db)
        doc = json.loads(table_structure(schools_db, schema))
        assert list(doc) == ["schools", "satscores", "frpm"]
        assert doc["schools"]["columns"]["County"] == "County values"

    def test_shuffle_deterministic(self, schools_db):
        schema = simple_schema(schools_db)
        a = table_structure(schools_db, schema, seed=1, iteration=2)
        b = table_structure(schools_db, schema, seed=1, iteration=2)
        assert a == b

    def test_shuffle_varies_by_iteration(self, schools_db):
        schema = simple_schema(schools_db)
        renders = {table_structure(schools_db, schema, seed=1, iteration=i) for i in range(8)}
        assert len(renders) > 1

    def test_shuffle_preserves_content(self, schools_db):
        schema = simple_schema(schools_db)
        doc = json.loads(table_structure(schools_db, schema, seed=5, iteration=0))
        assert sorted(doc) == ["frpm", "satscores", "schools"]
        assert sorted(doc["schools"]["columns"]) == ["CDSCode", "County", "FundingType"]


class TestFallbackKeyElements:
    def test_stopwords_removed(self):
        out = fallback_key_elements("What is the average score in Alameda")
        assert "Alameda" in out
        assert "the" not in out and "What" not in out

    def test_duplicates_collapse(self):
        assert fallback_key_elements("score score SCORE") == ["score"]

    def test_all_stopwords_keeps_tokens(self):
        assert fallback_key_elements("what is the") == ["what", "is", "the"]


class TestParseQuestion:
    def test_empty_question_rejected(self, schools_db):
        with pytest.raises(GatewayError, match="empty"):
            parse_question("", simple_schema(schools_db), schools_db,
                           CallableChatProvider(lambda r: ""))

    def test_key_elements_and_hints(self, schools_db):
        chat = CallableChatProvider(
            lambda r: json.dumps({
                "reasoning": "r",
                "key_elements": ["Alameda", "SAT takers", "alameda"],
                "columns": ["schools.County", "schools.Bogus", "junk"],
            })
        )
        parsed = parse_question("q", simple_schema(schools_db), schools_db, chat)
        assert parsed.key_elements == ["Alameda", "SAT takers"]
        assert parsed.hinted_columns == [QualifiedColumn("schools", "County")]
        assert not parsed.degraded

    def test_degraded_fallback(self, schools_db):
        chat = CallableChatProvider(lambda r: "completely unusable")
        parsed = parse_question(
            "How many SAT takers in Alameda", simple_schema(schools_db), schools_db, chat
        )
        assert parsed.degraded
        assert "Alameda" in parsed.key_elements


class TestMapSchema:
    def _run(self, schools_db, responses, k=5, theta=0.6):
        """responses: list of K raw strings (or callables) consumed in order."""
        calls = []

        def responder(req):
            calls.append(req.prompt)
            out = responses[len(calls) - 1]
            return out(req) if callable(out) else out

        parsed = ParsedQuestion(question="q", key_elements=["Alameda"])
        tally = map_schema(
            parsed, simple_schema(schools_db), schools_db,
            CallableChatProvider(responder), k=k, theta=theta, max_workers=1,
        )
        return tally, calls

    def test_counts_match_hand_tally(self, schools_db):
        responses = [
            column_selection(["schools.County"]),
            column_selection(["schools.County", "satscores.NumTstTakr"]),
            column_selection(["schools.County"]),
            column_selection(["satscores.NumTstTakr"]),
            column_selection(["schools.County"]),
        ]
        tally, calls = self._run(schools_db, responses)
        assert tally.counts == {
            QualifiedColumn("schools", "County"): 4,
            QualifiedColumn("satscores", "NumTstTakr"): 2,
        }
        assert tally.failed_iterations == 0
        assert len(calls) == 5

    def test_duplicate_in_one_iteration_counts_once(self, schools_db):
        responses = [column_selection(["schools.County", "schools.county"])] + [
            column_selection([]) for _ in range(4)
        ]
        tally, _ = self._run(schools_db, responses)
        assert tally.counts[QualifiedColumn("schools", "County")] == 1

    def test_unknown_columns_dropped_and_recorded(self, schools_db):
        responses = [column_selection(["schools.NotAColumn"])] + [
            column_selection([]) for _ in range(4)
        ]
        tally, _ = self._run(schools_db, responses)
        assert tally.counts == {}
        assert tally.dropped == ["schools.NotAColumn"]

    def test_each_iteration_sees_distinct_shuffle(self, schools_db):
        responses = [column_selection([]) for _ in range(5)]
        _, calls = self._run(schools_db, responses)
        assert len(set(calls)) > 1

    def test_partial_failures_tolerated(self, schools_db):
        def boom(req):
            raise GatewayError("timeout")

        responses = [column_selection(["schools.County"]), boom, boom,
                     column_selection(["schools.County"]), column_selection([])]
        tally, _ = self._run(schools_db, responses)
        assert tally.failed_iterations == 2
        assert tally.counts[QualifiedColumn("schools", "County")] == 2

    def test_all_failures_raise(self, schools_db):
        def boom(req):
            raise GatewayError("timeout")

        with pytest.raises(GatewayError) as err:
            self._run(schools_db, [boom] * 5)
        assert err.value.code == "mapping_unavailable"

    def test_parameter_validation(self, schools_db):
        parsed = ParsedQuestion(question="q", key_elements=[])
        chat = CallableChatProvider(lambda r: column_selection([]))
        with pytest.raises(ValueError):
            map_schema(parsed, simple_schema(schools_db), schools_db, chat, k=0)
        with pytest.raises(ValueError):
            map_schema(parsed, simple_schema(schools_db), schools_db, chat, theta=0.0)
        with pytest.raises(ValueError):
            map_schema(parsed, simple_schema(schools_db), schools_db, chat, theta=1.5)


class TestSelectColumns:
    def _tally(self, counts, k=5, theta=0.6):
        return VoteTally(
            counts={QualifiedColumn("t", c): n for c, n in counts.items()}, k=k, theta=theta
        )

    def test_threshold_boundary_inclusive(self):
        # theta*k = 3.0; a count of exactly 3 survives
        out = select_columns(self._tally({"a": 3, "b": 2}))
        assert out == {QualifiedColumn("t", "a")}

    def test_unanimity_required_at_theta_one(self):
        out = select_columns(self._tally({"a": 5, "b": 4}, theta=1.0))
        assert out == {QualifiedColumn("t", "a")}

    def test_low_theta_keeps_single_vote(self):
        out = select_columns(self._tally({"a": 1}, theta=0.2))
        assert out == {QualifiedColumn("t", "a")}

    @given(
        st.dictionaries(st.text("abcdef", min_size=1, max_size=2), st.integers(0, 7), max_size=6),
        st.integers(1, 7),
        st.floats(0.01, 1.0),
        st.floats(0.01, 1.0),
    )
    @settings(max_examples=300)
    def test_theta_monotonicity(self, counts, k, t1, t2):
        lo, hi = sorted((t1, t2))
        tally_lo = self._tally(counts, k=k, theta=lo)
        tally_hi = self._tally(counts, k=k, theta=hi)
        assert select_columns(tally_hi) <= select_columns(tally_lo)


class TestFillSchema:
    def test_adds_primary_keys(self, schools_db):
        selected = {QualifiedColumn("schools", "County")}
        sel = fill_schema(selected, schools_db, schools_joins())
        assert QualifiedColumn("schools", "CDSCode") in sel.filled
        assert sel.selected == selected

    def test_join_keys_for_two_tables(self, schools_db):
        selected = {
            QualifiedColumn("schools", "County"),
            QualifiedColumn("satscores", "NumTstTakr"),
        }
        sel = fill_schema(selected, schools_db, schools_joins())
        assert QualifiedColumn("satscores", "cds") in sel.filled
        assert QualifiedColumn("schools", "CDSCode") in sel.filled
        used = {(str(e.left), str(e.right)) for e in sel.join_edges_used}
        assert ("satscores.cds", "schools.CDSCode") in used

    def test_bridge_table_keys_included(self):
        a = make_table("a", [("id", DeclaredType.TEXT, ["1"]), ("x", DeclaredType.TEXT, ["v"])],
                       pk=["id"])
        bridge = make_table(
            "bridge",
            [("a_id", DeclaredType.TEXT, ["1"]), ("c_id", DeclaredType.TEXT, ["9"])],
        )
        c = make_table("c", [("id", DeclaredType.TEXT, ["9"]), ("y", DeclaredType.TEXT, ["w"])],
                       pk=["id"])
        db = Database("d", [a, bridge, c])
        joins = JoinGraph(
            nodes=["a", "bridge", "c"],
            edges=[
                JoinCandidate(QualifiedColumn("bridge", "a_id"), QualifiedColumn("a", "id"),
                              0.9, 1.0, 1.0, 1.9),
                JoinCandidate(QualifiedColumn("bridge", "c_id"), QualifiedColumn("c", "id"),
                              0.9, 1.0, 1.0, 1.9),
            ],
        )
        sel = fill_schema({QualifiedColumn("a", "x"), QualifiedColumn("c", "y")}, db, joins)
        assert QualifiedColumn("bridge", "a_id") in sel.filled
        assert QualifiedColumn("bridge", "c_id") in sel.filled

    def test_declared_fk_between_touched_tables(self):
        a = make_table("a", [("id", DeclaredType.TEXT, ["1"]), ("x", DeclaredType.TEXT, ["v"])],
                       pk=["id"])
        b = make_table(
            "b",
            [("ref", DeclaredType.TEXT, ["1"]), ("y", DeclaredType.TEXT, ["w"])],
            fks=[("ref", QualifiedColumn("a", "id"))],
        )
        db = Database("d", [a, b])
        joins = JoinGraph(
            nodes=["a", "b"],
            edges=[JoinCandidate(QualifiedColumn("b", "ref"), QualifiedColumn("a", "id"),
                                 0.0, 0.0, 0.0, math.inf, declared=True)],
        )
        sel = fill_schema({QualifiedColumn("a", "x"), QualifiedColumn("b", "y")}, db, joins)
        assert QualifiedColumn("b", "ref") in sel.filled

    def test_disconnected_pair_reported(self, schools_db):
        joins = JoinGraph(nodes=["schools", "satscores", "frpm"], edges=[])
        sel = fill_schema(
            {QualifiedColumn("schools", "County"), QualifiedColumn("frpm", "MealRate")},
            schools_db, joins,
        )
        assert sel.diagnostics["disconnected_tables"] == [["frpm", "schools"]]

    def test_empty_selection(self, schools_db):
        sel = fill_schema(set(), schools_db, schools_joins())
        assert sel.filled == set()
        assert sel.join_edges_used == []

    @given(st.sets(st.sampled_from([
        "schools.CDSCode", "schools.County", "schools.FundingType",
        "satscores.cds", "satscores.NumTstTakr", "satscores.AvgScrMath",
        "frpm.cd_code", "frpm.MealRate",
    ]), max_size=8))
    @settings(max_examples=200, suppress_health_check=[HealthCheck.function_scoped_fixture])
    def test_filled_is_superset_of_selected(self, schools_db, names):
        # schools_db is read-only here, so fixture reuse across examples is safe
        selected = {QualifiedColumn.parse(n) for n in names}
        sel = fill_schema(selected, schools_db, schools_joins())
        assert selected <= sel.filled


class TestRetrieveSchema:
    def test_end_to_end_with_mocks(self, schools_db):
        def responder(req):
            if "Extract the key elements" in req.prompt:
                return json.dumps({"reasoning": "r",
                                   "key_elements": ["Alameda", "SAT takers"],
                                   "columns": []})
            return column_selection(["schools.County", "satscores.NumTstTakr"])

        sel = retrieve_schema(
            "How many SAT takers in Alameda?", schools_db, simple_schema(schools_db),
            schools_joins(), CallableChatProvider(responder), k=5, theta=0.6, seed=1,
        )
        assert sel.selected == {
            QualifiedColumn("schools", "County"),
            QualifiedColumn("satscores", "NumTstTakr"),
        }
        assert QualifiedColumn("satscores", "cds") in sel.filled
        assert QualifiedColumn("schools", "CDSCode") in sel.filled
        assert sel.tally.counts[QualifiedColumn("schools", "County")] == 5

    def test_json_output_shape(self, schools_db):
        def responder(req):
            if "Extract the key elements" in req.prompt:
                return json.dumps({"reasoning": "r", "key_elements": ["Alameda"],
                                   "columns": []})
            return column_selection(["schools.County"])

        sel = retrieve_schema(
            "Schools in Alameda?", schools_db, simple_schema(schools_db),
            schools_joins(), CallableChatProvider(responder), seed=0,
        )
        doc = sel.to_json_dict()
        assert doc["selected"] == ["schools.County"]
        assert "schools.CDSCode" in doc["filled"]
        assert doc["tally"]["schools.County"] == 5
