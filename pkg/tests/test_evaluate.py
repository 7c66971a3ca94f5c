from __future__ import annotations

import random

import numpy as np
import pytest

from generators import random_schema, raw_rows, rows_to_records
from oracles import oracle_metrics, schema_as_tables
from text2db.evaluate import (
    EmptyJoin,
    Outcome,
    aggregate,
    column_consistency,
    db_success_rate,
    entity_coverage,
    evaluate_all,
    fk_coverage,
    humanize,
    max_matching,
    numeric,
    pk_coverage,
    ref_integrity,
    tuple_coverage,
    value_coverage,
    value_text,
)
from text2db.gateway import ExactMatchEmbedder
from text2db.materialize import DenormalizedTable, denormalize, emit_create_tables, emit_inserts, execute
from text2db.model import Column, DataType, ForeignKey, MatchConfig, Schema, Table, canonical_join_plan

CFG = MatchConfig()


def flat(names, rows, keys=(0,)):
    return DenormalizedTable(tuple(names), tuple(names), tuple(tuple(r) for r in rows), tuple(keys),
                             0 if 0 in keys else None)


class TableEmbedder:
    """Similarity from a lookup: texts listed together share a vector."""

    def __init__(self, groups):
        self.axis = {t: i for i, group in enumerate(groups) for t in group}
        self.n = len(groups)

    def __call__(self, texts):
        out = np.zeros((len(texts), self.n + len(texts)))
        for i, t in enumerate(texts):
            out[i, self.axis.get(t, self.n + i)] = 1.0
        return out


def test_entity_coverage_examples():
    emb = ExactMatchEmbedder()
    assert entity_coverage(["name", "age"], ["age", "name"], emb) == 1.0
    assert entity_coverage(["name", "age"], [], emb) == 0.0
    assert entity_coverage(["a", "b"], ["a"], emb) == 0.5
    assert entity_coverage(["Start_Date"], ["start date"], emb) == 1.0
    with pytest.raises(ValueError):
        entity_coverage([], ["a"], emb)


def _schema(n_keyed, n_tables, fks=()):
    tables = []
    for i in range(n_tables):
        cols = [Column("id", DataType.INTEGER, i < n_keyed)]
        cols += [Column(f"r{j}", DataType.INTEGER, False, ForeignKey(t, c)) for j, (owner, t, c) in enumerate(fks)
                 if owner == i]
        tables.append(Table(f"t{i}", tuple(cols)))
    return Schema(tuple(tables))


def test_pk_coverage_examples():
    assert pk_coverage(_schema(3, 3)) == 1.0
    assert pk_coverage(_schema(2, 3)) == pytest.approx(0.6667, abs=1e-4)
    assert pk_coverage(_schema(0, 1)) == 0.0


def test_fk_coverage_examples():
    assert fk_coverage(_schema(2, 2, [(1, "t0", "id")])) == 1.0
    assert fk_coverage(_schema(2, 2, [(1, "t0", "id"), (1, "ghost", "id")])) == 0.5
    assert fk_coverage(_schema(1, 1)) == 1.0


def test_db_success_rate_examples():
    assert db_success_rate([Outcome(True, True)] * 10) == 1.0
    assert db_success_rate([Outcome(True, False)]) == 0.0
    assert db_success_rate([Outcome(False, False)] * 5) == 0.0


def test_ref_integrity_examples():
    assert ref_integrity(flat(["a", "b"], [(1, 2)])) == 1.0
    assert ref_integrity(flat(["a", "b", "c", "d"], [(1, 2, None, 4)])) == 0.75
    assert ref_integrity(flat(["a", "b"], [(1, 2), (None, None)])) == 0.5
    with pytest.raises(EmptyJoin):
        ref_integrity(flat(["a"], []))


def test_tuple_coverage_examples():
    assert tuple_coverage([1, 2, 3], [3, 2, 1]) == 1.0
    assert tuple_coverage([1, 2, 3, 4, 5], [1, 2, 3]) == 0.6
    assert tuple_coverage([1, 2], [7, 8]) == 0.0
    assert tuple_coverage([1, 1, 2], [1, 1]) == 0.5


def test_value_coverage_examples():
    emb = ExactMatchEmbedder()
    gt = flat(["id", "city", "rate"], [(1, "Rome", 3.14)])
    assert value_coverage(gt, gt, CFG, emb) == 1.0
    assert value_coverage(gt, flat(["id", "city", "rate"], [(1, " rome ", 3.145)]), CFG, emb) == 1.0
    assert value_coverage(gt, flat(["id", "city", "rate"], [(1, "Rome", 3.16)]), CFG, emb) == 0.5
    assert value_coverage(gt, flat(["id", "city"], []), CFG, emb) == 0.0
    assert value_coverage(flat(["id"], [(1,)]), gt, CFG, emb) == 1.0


def test_matching_is_one_to_one():
    emb = ExactMatchEmbedder()
    gt = flat(["id", "a", "b"], [(1, "Rome", "Rome")])
    assert value_coverage(gt, flat(["id", "a"], [(1, "Rome")]), CFG, emb) == 0.5
    edges = np.array([[1, 1], [1, 0]], dtype=bool)
    assert max_matching(edges) == 2


def test_column_consistency_needs_matching_column_names():
    emb = TableEmbedder([["rome"], ["destination", "city"]])
    gt = flat(["id", "destination"], [(1, "Rome")])
    same = flat(["id", "city"], [(1, "Rome")])
    other = flat(["id", "notes"], [(1, "Rome")])
    assert column_consistency(gt, same, CFG, emb) == value_coverage(gt, same, CFG, emb) == 1.0
    assert value_coverage(gt, other, CFG, emb) == 1.0
    assert column_consistency(gt, other, CFG, emb) == 0.0
    assert column_consistency(gt, flat(["id"], []), CFG, emb) == 0.0


@pytest.mark.parametrize("value, expected", [
    ("1,200", 1200.0), ("3.5", 3.5), ("-.5", -0.5), ("1e3", 1000.0), ("12,34", None), ("June", None),
    (True, 1.0), (None, None), ("nan", None),
])
def test_numeric(value, expected):
    assert numeric(value) == expected


def test_value_text_and_humanize():
    assert value_text("  Rome ") == "rome"
    assert value_text(2.0) == "2"
    assert value_text("") is None
    assert humanize("Start__Date ") == "start date"


def _db_table(schema, rows):
    with execute(emit_create_tables(schema) + emit_inserts(schema, rows_to_records(schema, rows))) as handle:
        return denormalize(handle, schema, canonical_join_plan(schema)), handle.has_nonnull_tuple(schema)


def test_self_comparison_is_perfect():
    rng = random.Random(3)
    tree = random_schema(rng, max_tables=3)
    rows = raw_rows(rng, tree, null_rate=0.0)
    table, nonnull = _db_table(tree.schema, rows)
    report = evaluate_all(table, table, tree.schema, [Outcome(True, nonnull)], CFG, ExactMatchEmbedder())
    assert (report.tc, report.vc, report.cc) == (1.0, 1.0, 1.0)


def test_failed_generation_scores_zero_on_tuples():
    gt = flat(["id", "city"], [(1, "Rome")])
    schema = Schema((Table("t", (Column("id", DataType.INTEGER, True), Column("city", DataType.TEXT))),))
    report = evaluate_all(gt, None, schema, [Outcome(False, False)], CFG, ExactMatchEmbedder())
    assert (report.tc, report.vc, report.cc, report.rrir, report.dbr) == (0, 0, 0, 0, 0)
    assert report.ecs == 1.0 and report.pkc == 1.0
    assert "generation_failed" in report.flags
    nothing = evaluate_all(gt, None, None, [Outcome(False, False)], CFG, ExactMatchEmbedder())
    assert "no_schema" in nothing.flags


def test_toy_corpus_matches_oracle_means():
    rng = random.Random(11)
    reports, expected = [], []
    for _ in range(3):
        gt_tree, gen_tree = random_schema(rng, max_tables=3), random_schema(rng, max_tables=3)
        gt_rows, gen_rows = raw_rows(rng, gt_tree), raw_rows(rng, gen_tree)
        gt_table, _ = _db_table(gt_tree.schema, gt_rows)
        gen_table, nonnull = _db_table(gen_tree.schema, gen_rows)
        reports.append(evaluate_all(gt_table, gen_table, gen_tree.schema, [Outcome(True, nonnull)], CFG,
                                    ExactMatchEmbedder()))
        expected.append(oracle_metrics(schema_as_tables(gt_tree.schema), gt_rows, schema_as_tables(gen_tree.schema),
                                       gen_rows))
    corpus = aggregate(reports).aggregate
    for m in ("ecs", "pkc", "fkc", "rrir", "tc", "vc", "cc", "dbr"):
        assert getattr(corpus, m) == pytest.approx(sum(e[m] for e in expected) / 3, abs=1e-12)


def test_report_rendering():
    report = aggregate([evaluate_all(flat(["id", "x"], [(1, "a")]), flat(["id", "x"], [(1, "a")]), None,
                                     [Outcome(True, True)], CFG, ExactMatchEmbedder(), doc_id="d1")],
                       [Outcome(True, True)])
    text = report.to_text()
    assert text.splitlines()[0].split() == ["document", "DBR", "ECS", "PKC", "FKC", "RRIR", "TC", "VC", "CC"]
    assert '"corpus"' in report.to_json()
